use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scene::{random_scene, render, SceneSpec};
use super::transform::{apply_transform, random_transform, TransformKind, TransformSpec};
use crate::datamodel::{load_image, save_image, ImageTensor, Provenance};
use crate::error::{LocError, Result};
use crate::rng::substream_indexed;

const MANIFEST: &str = "manifest.json";
const META: &str = "meta.json";
/// Redraws allowed before a sample is declared ungeneratable.
const MAX_ATTEMPTS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    Pairs,
    Quads,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusOptions {
    pub image_size: usize,
    pub transforms: Vec<TransformKind>,
    /// Minimum mean-square change an edit must cause on every scene it touches.
    pub min_change: f32,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self {
            image_size: 64,
            transforms: TransformKind::ALL.to_vec(),
            min_change: 0.01,
        }
    }
}

impl CorpusOptions {
    fn validate(&self) -> Result<()> {
        if self.image_size < 4 {
            return Err(LocError::Config(format!("image_size {} too small", self.image_size)));
        }
        if self.transforms.is_empty() {
            return Err(LocError::Config("no transforms selected".into()));
        }
        if !(self.min_change >= 0.0) {
            return Err(LocError::Config(format!("min_change {} must be >= 0", self.min_change)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub kind: CorpusKind,
    pub count: usize,
    pub seed: u64,
    pub options: CorpusOptions,
    /// Samples per transform kind.
    pub census: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub index: usize,
    pub provenance: Provenance,
    pub transform_id: String,
    pub transform: TransformSpec,
    pub scene_seed: u64,
    pub scene: SceneSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_scene: Option<SceneSpec>,
}

#[derive(Clone, Debug)]
pub struct PairRecord {
    pub before: ImageTensor,
    pub after: ImageTensor,
    pub meta: SampleMeta,
}

#[derive(Clone, Debug)]
pub struct QuadRecord {
    pub before: ImageTensor,
    pub after: ImageTensor,
    pub query: ImageTensor,
    pub target: ImageTensor,
    pub meta: SampleMeta,
}

fn change(a: &ImageTensor, b: &ImageTensor) -> f32 {
    let n = a.data().len() as f64;
    (a.data().iter().zip(b.data()).map(|(x, y)| f64::from(x - y).powi(2)).sum::<f64>() / n) as f32
}

fn sample_dir(out: &Path, i: usize) -> PathBuf {
    out.join(format!("sample_{i:06}"))
}

fn scene_seed(seed: u64, i: usize, slot: &str) -> u64 {
    use rand::RngCore;
    substream_indexed(seed, slot, i as u64).next_u64()
}

struct Generated {
    images: Vec<(&'static str, ImageTensor)>,
    meta: SampleMeta,
}

fn gen_sample(i: usize, kind: CorpusKind, opts: &CorpusOptions, seed: u64) -> Result<Generated> {
    let t_kind = opts.transforms[i % opts.transforms.len()];
    let mut rng = substream_indexed(seed, "synthdata.sample", i as u64);
    let size = opts.image_size;
    for attempt in 0..MAX_ATTEMPTS {
        let sa = scene_seed(seed, i * MAX_ATTEMPTS + attempt, "synthdata.scene_a");
        let scene = random_scene(&mut substream_indexed(sa, "scene", 0), sa, t_kind.min_shapes());
        let query_scene = match kind {
            CorpusKind::Pairs => None,
            CorpusKind::Quads => {
                let sb = scene_seed(seed, i * MAX_ATTEMPTS + attempt, "synthdata.scene_b");
                Some(random_scene(&mut substream_indexed(sb, "scene", 0), sb, t_kind.min_shapes()))
            }
        };
        let scenes: Vec<&SceneSpec> = std::iter::once(&scene).chain(query_scene.as_ref()).collect();
        let t = random_transform(&mut rng, t_kind, &scenes)?;
        let a = render(&scene, size);
        let ap = apply_transform(&a, Some(&scene), &t)?.quantized();
        if change(&a, &ap) < opts.min_change {
            continue;
        }
        let mut images = vec![("A.png", a), ("Ap.png", ap)];
        if let Some(qs) = &query_scene {
            let b = render(qs, size);
            if b == images[0].1 {
                continue;
            }
            let bp = apply_transform(&b, Some(qs), &t)?.quantized();
            if change(&b, &bp) < opts.min_change {
                continue;
            }
            images.push(("B.png", b));
            images.push(("Bp.png", bp));
        }
        let meta = SampleMeta {
            index: i,
            provenance: match kind {
                CorpusKind::Pairs => Provenance::FlipPaired,
                CorpusKind::Quads => Provenance::GenuineQuad,
            },
            transform_id: t.id.clone(),
            transform: t,
            scene_seed: sa,
            scene,
            query_scene,
        };
        return Ok(Generated { images, meta });
    }
    Err(LocError::Dataset(format!(
        "sample {i}: no {} edit reached min_change {} in {MAX_ATTEMPTS} attempts",
        t_kind.name(),
        opts.min_change
    )))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| LocError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(LocError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| LocError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn gen_corpus(kind: CorpusKind, n: usize, opts: &CorpusOptions, out: &Path, seed: u64) -> Result<CorpusManifest> {
    opts.validate()?;
    fs::create_dir_all(out).map_err(|e| LocError::io(out, e))?;
    let census = (0..n)
        .into_par_iter()
        .map(|i| -> Result<TransformKind> {
            let g = gen_sample(i, kind, opts, seed)?;
            let dir = sample_dir(out, i);
            fs::create_dir_all(&dir).map_err(|e| LocError::io(&dir, e))?;
            for (name, img) in &g.images {
                save_image(img, &dir.join(name))?;
            }
            write_json(&g.meta, &dir.join(META))?;
            Ok(g.meta.transform.kind())
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(BTreeMap::new(), |mut m, k| {
            *m.entry(k.name().to_string()).or_insert(0) += 1;
            m
        });
    let manifest = CorpusManifest {
        kind,
        count: n,
        seed,
        options: opts.clone(),
        census,
    };
    write_json(&manifest, &out.join(MANIFEST))?;
    Ok(manifest)
}

/// Writes `n` before/after pairs under `out`.
pub fn gen_pair_dataset(n: usize, opts: &CorpusOptions, out: &Path, seed: u64) -> Result<CorpusManifest> {
    gen_corpus(CorpusKind::Pairs, n, opts, out, seed)
}

/// Writes `n` genuine quads: two different scenes edited by the same transform.
pub fn gen_quad_evalset(n: usize, opts: &CorpusOptions, out: &Path, seed: u64) -> Result<CorpusManifest> {
    gen_corpus(CorpusKind::Quads, n, opts, out, seed)
}

fn load_corpus(dir: &Path, expect: CorpusKind) -> Result<(CorpusManifest, Vec<(PathBuf, SampleMeta)>)> {
    let mpath = dir.join(MANIFEST);
    if !mpath.exists() {
        return Err(LocError::EmptyDataset(dir.to_path_buf()));
    }
    let manifest: CorpusManifest = read_json(&mpath)?;
    if manifest.kind != expect {
        return Err(LocError::Dataset(format!(
            "{} holds {:?}, expected {:?}",
            dir.display(),
            manifest.kind,
            expect
        )));
    }
    if manifest.count == 0 {
        return Err(LocError::EmptyDataset(dir.to_path_buf()));
    }
    let want = match expect {
        CorpusKind::Pairs => Provenance::FlipPaired,
        CorpusKind::Quads => Provenance::GenuineQuad,
    };
    let metas = (0..manifest.count)
        .map(|i| {
            let sd = sample_dir(dir, i);
            let meta: SampleMeta = read_json(&sd.join(META))?;
            if meta.provenance != want {
                return Err(LocError::Dataset(format!(
                    "{}: provenance {:?} in a {:?} corpus",
                    sd.display(),
                    meta.provenance,
                    expect
                )));
            }
            Ok((sd, meta))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, metas))
}

/// Loads a pair corpus. Quad corpora are refused so evaluation data can never
/// end up in training.
pub fn load_pair_dataset(dir: &Path) -> Result<(CorpusManifest, Vec<PairRecord>)> {
    let (manifest, metas) = load_corpus(dir, CorpusKind::Pairs)?;
    let size = manifest.options.image_size;
    let records = metas
        .into_par_iter()
        .map(|(sd, meta)| {
            Ok(PairRecord {
                before: load_image(&sd.join("A.png"), size)?,
                after: load_image(&sd.join("Ap.png"), size)?,
                meta,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, records))
}

pub fn load_quad_evalset(dir: &Path) -> Result<(CorpusManifest, Vec<QuadRecord>)> {
    let (manifest, metas) = load_corpus(dir, CorpusKind::Quads)?;
    let size = manifest.options.image_size;
    let records = metas
        .into_par_iter()
        .map(|(sd, meta)| {
            Ok(QuadRecord {
                before: load_image(&sd.join("A.png"), size)?,
                after: load_image(&sd.join("Ap.png"), size)?,
                query: load_image(&sd.join("B.png"), size)?,
                target: load_image(&sd.join("Bp.png"), size)?,
                meta,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, records))
}
