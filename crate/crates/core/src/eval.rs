//! Metrics and the reverse/exchange ablation harness.

use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::datamodel::{stack_images, unstack_images, EditSample, ImageTensor, Provenance};
use crate::diffusion::{sample, EditUnet, NoiseSchedule, UnetPredictor};
use crate::error::{LocError, Result};
use crate::hypernetwork::Hypernetwork;
use crate::lora::negate_bundle;
use crate::nn::ParamStore;
use crate::config::RunConfig;
use crate::synthdata::{PairRecord, QuadRecord};
use crate::training::{train_stage, LossReport, RunOutput, StagePlan, TrainState, STAGE1};

/// Norm below which a feature difference counts as no change at all.
const MIN_NORM: f64 = 1e-8;
const CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricSource {
    TrainedInstructionEncoderFrozen,
    PixelIdentity,
}

/// Feature map `M` used by the instruction-alignment score.
pub enum MetricEncoder {
    PixelIdentity,
    /// Mean-pooled tokens of a frozen copy of a hypernetwork's image encoder.
    Instruction(Box<Hypernetwork>),
}

impl MetricEncoder {
    pub fn from_hypernet(h: &Hypernetwork) -> Result<Self> {
        let copy = Hypernetwork::from_store(h.config(), h.store().deep_clone()?)?;
        Ok(Self::Instruction(Box::new(copy)))
    }

    pub fn source(&self) -> MetricSource {
        match self {
            Self::PixelIdentity => MetricSource::PixelIdentity,
            Self::Instruction(_) => MetricSource::TrainedInstructionEncoderFrozen,
        }
    }

    pub fn features(&self, images: &[&ImageTensor]) -> Result<Vec<Vec<f64>>> {
        match self {
            Self::PixelIdentity => Ok(images
                .iter()
                .map(|i| i.data().iter().map(|&v| f64::from(v)).collect())
                .collect()),
            Self::Instruction(h) => {
                let mut out = Vec::with_capacity(images.len());
                for chunk in images.chunks(CHUNK) {
                    let x = stack_images(chunk, &Device::Cpu)?;
                    let pooled = h.encoder().forward(&x)?.mean(1)?.to_vec2::<f32>()?;
                    out.extend(pooled.into_iter().map(|r| r.into_iter().map(f64::from).collect()));
                }
                Ok(out)
            }
        }
    }
}

fn cosine(x: &[f64], y: &[f64], what: &str) -> Result<f64> {
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx < MIN_NORM || ny < MIN_NORM {
        return Err(LocError::UndefinedScore(format!(
            "{what}: zero-norm vector ({nx:.3e}, {ny:.3e})"
        )));
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    Ok((dot / (nx * ny)).clamp(-1.0, 1.0))
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `cos(M(B′) − M(B), M(A′) − M(A))` on precomputed features.
pub fn score_from_features(fa: &[f64], fap: &[f64], fb: &[f64], fbp: &[f64]) -> Result<f64> {
    cosine(&diff(fbp, fb), &diff(fap, fa), "instruction score")
}

pub fn visual_instruction_score(
    a: &ImageTensor,
    ap: &ImageTensor,
    b: &ImageTensor,
    bp_pred: &ImageTensor,
    enc: &MetricEncoder,
) -> Result<f64> {
    if [ap, b, bp_pred].iter().any(|i| i.size() != a.size()) {
        return Err(LocError::Shape("instruction score needs four same-size images".into()));
    }
    let f = enc.features(&[a, ap, b, bp_pred])?;
    score_from_features(&f[0], &f[1], &f[2], &f[3])
}

/// Mean squared pixel difference.
pub fn fidelity_error(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    if x.size() != y.size() {
        return Err(LocError::Shape(format!("{} vs {} pixel images", x.size(), y.size())));
    }
    let n = x.data().len() as f64;
    Ok(x.data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| f64::from(a - b).powi(2))
        .sum::<f64>()
        / n)
}

/// `fidelity(pred, A′) − fidelity(pred, B′)`; positive when the prediction is
/// closer to the true target than to the demonstration's after-image.
pub fn leakage_margin(sample: &EditSample, pred: &ImageTensor) -> Result<f64> {
    if sample.provenance != Provenance::GenuineQuad {
        return Err(LocError::UndefinedScore(
            "leakage needs a genuine quad with its own ground-truth target".into(),
        ));
    }
    Ok(fidelity_error(pred, &sample.after)? - fidelity_error(pred, &sample.target)?)
}

/// Mean cosine between `ℋ(A, A′)` and `−ℋ(A′, A)` over the effective deltas.
pub fn lora_consistency(hypernet: &Hypernetwork, pairs: &[(&ImageTensor, &ImageTensor)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(LocError::Dataset("consistency needs at least one pair".into()));
    }
    let dev = Device::Cpu;
    let mut total = 0.0;
    for chunk in pairs.chunks(CHUNK) {
        let a = stack_images(&chunk.iter().map(|p| p.0).collect::<Vec<_>>(), &dev)?;
        let ap = stack_images(&chunk.iter().map(|p| p.1).collect::<Vec<_>>(), &dev)?;
        let fwd = hypernet.forward(&a, &ap)?.detach()?.effective_flat()?.to_vec2::<f32>()?;
        let bwd = negate_bundle(&hypernet.forward(&ap, &a)?.detach()?)?
            .effective_flat()?
            .to_vec2::<f32>()?;
        for (x, y) in fwd.iter().zip(&bwd) {
            let x: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
            let y: Vec<f64> = y.iter().map(|&v| f64::from(v)).collect();
            total += cosine(&x, &y, "lora consistency")?;
        }
    }
    Ok(total / pairs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub index: usize,
    pub transform_id: String,
    /// `None` when the prediction shows no change in feature space.
    pub align_score: Option<f64>,
    pub fidelity_err: f64,
    pub leak_margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub align_score: Option<f64>,
    pub align_defined: usize,
    pub fidelity_err: f64,
    pub leak_margin: f64,
    pub positive_margin_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub config: serde_json::Value,
    pub encoder: MetricSource,
    pub sampling_steps: usize,
    pub seed: u64,
    pub aggregate: Aggregate,
    #[serde(default)]
    pub lora_consistency: Option<f64>,
    pub samples: Vec<SampleScore>,
}

impl EvalReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| LocError::io(path, e))
    }
}

fn aggregate(samples: &[SampleScore]) -> Aggregate {
    let n = samples.len().max(1) as f64;
    let defined: Vec<f64> = samples.iter().filter_map(|s| s.align_score).collect();
    Aggregate {
        count: samples.len(),
        align_score: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        align_defined: defined.len(),
        fidelity_err: samples.iter().map(|s| s.fidelity_err).sum::<f64>() / n,
        leak_margin: samples.iter().map(|s| s.leak_margin).sum::<f64>() / n,
        positive_margin_fraction: samples.iter().filter(|s| s.leak_margin > 0.0).count() as f64 / n,
    }
}

/// Edits every quad's query with the bundle from its own pair, in chunks of 16
/// sharing one noise draw (chunk `k` uses seed `seed + k`).
pub fn predict_quads(
    quads: &[QuadRecord],
    hypernet: &Hypernetwork,
    model: &EditUnet,
    sched: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<Vec<ImageTensor>> {
    let dev = Device::Cpu;
    let mut out = Vec::with_capacity(quads.len());
    for (k, chunk) in quads.chunks(CHUNK).enumerate() {
        let a = stack_images(&chunk.iter().map(|q| &q.before).collect::<Vec<_>>(), &dev)?;
        let ap = stack_images(&chunk.iter().map(|q| &q.after).collect::<Vec<_>>(), &dev)?;
        let b = stack_images(&chunk.iter().map(|q| &q.query).collect::<Vec<_>>(), &dev)?;
        let bundle = hypernet.forward(&a, &ap)?.detach()?;
        let predictor = UnetPredictor {
            unet: model,
            bundle: Some(&bundle),
        };
        let pred: Tensor = sample(&predictor, &b, sched, steps, seed.wrapping_add(k as u64))?;
        out.extend(unstack_images(&pred)?);
    }
    Ok(out)
}

pub struct EvalOptions<'a> {
    pub name: &'a str,
    pub steps: usize,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Pairs for the consistency score; skipped when empty.
    pub consistency_pairs: &'a [(&'a ImageTensor, &'a ImageTensor)],
}

pub fn evaluate(
    quads: &[QuadRecord],
    hypernet: &Hypernetwork,
    model: &EditUnet,
    sched: &NoiseSchedule,
    enc: &MetricEncoder,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if quads.is_empty() {
        return Err(LocError::Dataset("evaluation needs at least one quad".into()));
    }
    let preds = predict_quads(quads, hypernet, model, sched, opts.steps, opts.seed)?;
    let mut images = Vec::with_capacity(quads.len() * 4);
    for (q, p) in quads.iter().zip(&preds) {
        images.extend([&q.before, &q.after, &q.query, p]);
    }
    let feats = enc.features(&images)?;
    let mut samples = Vec::with_capacity(quads.len());
    for (i, (q, p)) in quads.iter().zip(&preds).enumerate() {
        let f = &feats[4 * i..4 * i + 4];
        let align = match score_from_features(&f[0], &f[1], &f[2], &f[3]) {
            Ok(s) => Some(s),
            Err(LocError::UndefinedScore(_)) => None,
            Err(e) => return Err(e),
        };
        let sample = EditSample {
            before: q.before.clone(),
            after: q.after.clone(),
            query: q.query.clone(),
            target: q.target.clone(),
            provenance: q.meta.provenance,
            transform_id: Some(q.meta.transform_id.clone()),
        };
        samples.push(SampleScore {
            index: q.meta.index,
            transform_id: q.meta.transform_id.clone(),
            align_score: align,
            fidelity_err: fidelity_error(p, &q.target)?,
            leak_margin: leakage_margin(&sample, p)?,
        });
    }
    let lora_consistency = if opts.consistency_pairs.is_empty() {
        None
    } else {
        Some(lora_consistency(hypernet, opts.consistency_pairs)?)
    };
    Ok(EvalReport {
        name: opts.name.to_string(),
        config: opts.config.clone(),
        encoder: enc.source(),
        sampling_steps: opts.steps,
        seed: opts.seed,
        aggregate: aggregate(&samples),
        lora_consistency,
        samples,
    })
}

/// Side-by-side per-sample margins of several reports.
pub fn write_margins_csv(reports: &[&EvalReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| LocError::io(path, e.into()))?;
    let mut header = vec!["index".to_string(), "transform_id".to_string()];
    header.extend(reports.iter().map(|r| format!("leak_margin_{}", r.name)));
    w.write_record(&header).map_err(|e| LocError::io(path, e.into()))?;
    let n = reports.first().map_or(0, |r| r.samples.len());
    for i in 0..n {
        let first = &reports[0].samples[i];
        let mut row = vec![first.index.to_string(), first.transform_id.clone()];
        row.extend(reports.iter().map(|r| format!("{:.6}", r.samples[i].leak_margin)));
        w.write_record(&row).map_err(|e| LocError::io(path, e.into()))?;
    }
    w.flush().map_err(|e| LocError::io(path, e))
}

/// Thresholds the ablation is judged against.
pub const MIN_POSITIVE_FRACTION: f64 = 0.70;
pub const MIN_LEAKAGE_GAP: f64 = 0.15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub reverse_on: EvalReport,
    pub reverse_off: EvalReport,
    #[serde(default)]
    pub exchange_off: Option<EvalReport>,
}

impl AblationReport {
    pub fn leakage_gap(&self) -> f64 {
        self.reverse_on.aggregate.positive_margin_fraction - self.reverse_off.aggregate.positive_margin_fraction
    }

    /// One line per check: leakage fraction, leakage gap, and consistency.
    pub fn verdicts(&self) -> Vec<(String, bool)> {
        let on = self.reverse_on.aggregate.positive_margin_fraction;
        let mut v = vec![
            (
                format!("reverse-on positive-margin fraction {on:.3} >= {MIN_POSITIVE_FRACTION}"),
                on >= MIN_POSITIVE_FRACTION,
            ),
            (
                format!("leakage gap {:.3} >= {MIN_LEAKAGE_GAP}", self.leakage_gap()),
                self.leakage_gap() >= MIN_LEAKAGE_GAP,
            ),
        ];
        if let (Some(x), Some(c_on)) = (&self.exchange_off, self.reverse_on.lora_consistency) {
            if let Some(c_off) = x.lora_consistency {
                v.push((
                    format!("consistency exchange-on {c_on:.4} >= exchange-off {c_off:.4}"),
                    c_on >= c_off,
                ));
            }
        }
        v
    }
}

/// Keeps a trained hypernetwork's parameters apart from later training.
pub fn snapshot(h: &Hypernetwork) -> Result<Hypernetwork> {
    Hypernetwork::from_store(h.config(), ParamStore::deep_clone(h.store())?)
}

pub struct AblationOptions {
    pub include_exchange: bool,
    pub eval_steps: usize,
    pub eval_seed: u64,
    /// Per-arm metrics logs and checkpoints go to `<out_dir>/<arm>`.
    pub out_dir: Option<std::path::PathBuf>,
}

/// One trained arm of the ablation.
pub struct AblationArm {
    pub name: String,
    pub config: RunConfig,
    pub hypernet: Hypernetwork,
    pub state: TrainState,
    pub losses: Vec<LossReport>,
}

fn train_arm(
    name: &str,
    cfg: RunConfig,
    pairs: &[PairRecord],
    model: &EditUnet,
    sched: &NoiseSchedule,
    out_dir: Option<&Path>,
) -> Result<AblationArm> {
    let hypernet = Hypernetwork::init(&cfg.hypernet, cfg.train.seed)?;
    let mut state = TrainState::new(&cfg.train);
    let plan = StagePlan {
        name: STAGE1.into(),
        epochs: cfg.train.epochs,
        max_steps: cfg.train.max_steps,
        lr: cfg.train.lr,
    };
    let out = match out_dir {
        Some(d) => {
            let dir = d.join(name);
            std::fs::create_dir_all(&dir).map_err(|e| LocError::io(&dir, e))?;
            Some(RunOutput {
                dir,
                config: cfg.to_json(),
                seed: cfg.train.seed,
            })
        }
        None => None,
    };
    log::info!("ablation arm `{name}`");
    let losses = train_stage(pairs, &hypernet, model, sched, &cfg.train, &plan, &mut state, out.as_ref())?;
    Ok(AblationArm {
        name: name.to_string(),
        config: cfg,
        hypernet,
        state,
        losses,
    })
}

/// Trains the reverse-on and reverse-off arms (and optionally exchange-off)
/// from identical seeds and step counts, then evaluates all of them on the
/// genuine quads with the metric encoder taken from the reverse-on arm.
pub fn run_ablation(
    pairs: &[PairRecord],
    quads: &[QuadRecord],
    heldout: &[PairRecord],
    model: &EditUnet,
    cfg: &RunConfig,
    opts: &AblationOptions,
) -> Result<(AblationReport, Vec<AblationArm>)> {
    cfg.validate()?;
    if quads.is_empty() {
        return Err(LocError::Dataset("ablation needs evaluation quads".into()));
    }
    let sched = cfg.schedule()?;
    let out_dir = opts.out_dir.as_deref();
    let mut arms = Vec::new();
    let mut on = cfg.clone();
    on.train.reverse_enabled = true;
    arms.push(train_arm("reverse_on", on.clone(), pairs, model, &sched, out_dir)?);
    let mut off = on.clone();
    off.train.reverse_enabled = false;
    arms.push(train_arm("reverse_off", off, pairs, model, &sched, out_dir)?);
    if opts.include_exchange {
        let mut x = on.clone();
        x.train.exchange_enabled = false;
        arms.push(train_arm("exchange_off", x, pairs, model, &sched, out_dir)?);
    }
    let enc = MetricEncoder::from_hypernet(&arms[0].hypernet)?;
    let held: Vec<(&ImageTensor, &ImageTensor)> = heldout.iter().map(|r| (&r.before, &r.after)).collect();
    let mut reports = Vec::new();
    for arm in &arms {
        let eo = EvalOptions {
            name: &arm.name,
            steps: opts.eval_steps,
            seed: opts.eval_seed,
            config: arm.config.to_json(),
            consistency_pairs: &held,
        };
        reports.push(evaluate(quads, &arm.hypernet, model, &sched, &enc, &eo)?);
    }
    let mut it = reports.into_iter();
    let report = AblationReport {
        reverse_on: it.next().expect("reverse-on report"),
        reverse_off: it.next().expect("reverse-off report"),
        exchange_off: it.next(),
    };
    if let Some(d) = out_dir {
        let path = d.join("ablation.json");
        std::fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| LocError::io(&path, e))?;
        let mut all = vec![&report.reverse_on, &report.reverse_off];
        all.extend(report.exchange_off.as_ref());
        write_margins_csv(&all, &d.join("margins.csv"))?;
    }
    Ok((report, arms))
}
