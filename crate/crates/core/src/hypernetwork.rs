//! The hypernetwork: a patch-transformer encoder shared by both images of the
//! pair, a linear fusion of the two token streams, a query decoder with one
//! learnable query per host attention layer, and per-layer projection heads
//! that emit the eight LoRA factors of that layer.

use std::path::PathBuf;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::datamodel::{load_checkpoint, CHANNELS};
use crate::error::{LocError, Result};
use crate::lora::{LayerDelta, LoRABundle, SlotFactors};
use crate::nn::{patchify, Attention, FeedForward, Init, LayerNorm, Linear, ParamBuilder, ParamStore};
use crate::rng::substream;

pub const PREFIX: &str = "hypernet";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypernetConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub enc_dim: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub fuse_dim: usize,
    /// One query per host attention layer.
    pub num_queries: usize,
    pub dec_blocks: usize,
    pub dec_heads: usize,
    pub lora_rank: usize,
    pub host_layer_dims: Vec<usize>,
    /// Archive holding `hypernet.encoder.*` tensors to start the encoder from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained_encoder: Option<PathBuf>,
}

impl HypernetConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(LocError::Config(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return err(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_queries != self.host_layer_dims.len() {
            return err(format!(
                "{} decoder queries for {} host layers",
                self.num_queries,
                self.host_layer_dims.len()
            ));
        }
        let min_dim = self.host_layer_dims.iter().copied().min().unwrap_or(0);
        if self.lora_rank == 0 || self.lora_rank * 4 > min_dim {
            return err(format!(
                "lora rank {} must be in [1, {}] for host width {min_dim}",
                self.lora_rank,
                min_dim / 4
            ));
        }
        if self.enc_dim % self.enc_heads != 0 || self.fuse_dim % self.dec_heads != 0 {
            return err("attention widths must divide by their head counts".into());
        }
        Ok(())
    }

    pub fn token_count(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }
}

/// `f_vis_ins`: fused instruction tokens, `B×N_tok×fuse_dim`.
#[derive(Clone, Debug)]
pub struct InstructionFeature {
    pub tokens: Tensor,
}

/// Learnable decoder queries, `L×fuse_dim`.
#[derive(Clone, Debug)]
pub struct DecoderQueries {
    pub q: Tensor,
}

struct EncoderBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ff: FeedForward,
}

impl EncoderBlock {
    fn new(pb: &mut ParamBuilder, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(&mut pb.pp("ln1"), dim)?,
            attn: Attention::new(&mut pb.pp("attn"), dim, heads)?,
            ln2: LayerNorm::new(&mut pb.pp("ln2"), dim)?,
            ff: FeedForward::new(&mut pb.pp("ff"), dim, 4)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, None)?)?;
        Ok((&x + self.ff.forward(&self.ln2.forward(&x)?)?)?)
    }
}

/// Patch-transformer image encoder (ℰ).
pub struct PatchEncoder {
    patch: usize,
    embed: Linear,
    pos: Tensor,
    blocks: Vec<EncoderBlock>,
    norm: LayerNorm,
}

impl PatchEncoder {
    fn new(pb: &mut ParamBuilder, cfg: &HypernetConfig) -> Result<Self> {
        let p = cfg.patch_size;
        Ok(Self {
            patch: p,
            embed: Linear::new(&mut pb.pp("embed"), p * p * CHANNELS, cfg.enc_dim, true)?,
            pos: pb.tensor("pos", &[cfg.token_count(), cfg.enc_dim], Init::Normal(0.02))?,
            blocks: (0..cfg.enc_depth)
                .map(|i| EncoderBlock::new(&mut pb.pp(format!("blocks.{i}")), cfg.enc_dim, cfg.enc_heads))
                .collect::<Result<_>>()?,
            norm: LayerNorm::new(&mut pb.pp("norm"), cfg.enc_dim)?,
        })
    }

    /// `B×H×W×C` images to `B×N_tok×enc_dim` tokens.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let mut x = self
            .embed
            .forward(&patchify(images, self.patch)?)?
            .broadcast_add(&self.pos)?;
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        self.norm.forward(&x)
    }
}

struct DecoderBlock {
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross_attn: Attention,
    ln3: LayerNorm,
    ff: FeedForward,
}

impl DecoderBlock {
    fn new(pb: &mut ParamBuilder, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(&mut pb.pp("ln1"), dim)?,
            self_attn: Attention::new(&mut pb.pp("self_attn"), dim, heads)?,
            ln2: LayerNorm::new(&mut pb.pp("ln2"), dim)?,
            cross_attn: Attention::new(&mut pb.pp("cross_attn"), dim, heads)?,
            ln3: LayerNorm::new(&mut pb.pp("ln3"), dim)?,
            ff: FeedForward::new(&mut pb.pp("ff"), dim, 4)?,
        })
    }

    fn forward(&self, q: &Tensor, f: &Tensor) -> Result<Tensor> {
        let h = self.ln1.forward(q)?;
        let q = (q + self.self_attn.forward(&h, &h, None)?)?;
        let q = (&q + self.cross_attn.forward(&self.ln2.forward(&q)?, f, None)?)?;
        Ok((&q + self.ff.forward(&self.ln3.forward(&q)?)?)?)
    }
}

/// Per-layer linear head 𝒮ᵢ, stored as its two column blocks: the half that
/// emits the four `U_A` factors and the half that emits the four `U_B` factors.
struct ProjectionHead {
    a: Linear,
    b: Linear,
    dim: usize,
}

fn build_head(pb: &mut ParamBuilder, fuse: usize, dim: usize, rank: usize) -> Result<ProjectionHead> {
    let width = 4 * dim * rank;
    let bound = 1.0 / (fuse as f32).sqrt();
    let a = Linear::from_parts(
        pb.tensor("a.w", &[fuse, width], Init::Uniform(bound))?,
        Some(pb.tensor("a.b", &[width], Init::Zeros)?),
    );
    let b = Linear::from_parts(
        pb.tensor("b.w", &[fuse, width], Init::Zeros)?,
        Some(pb.tensor("b.b", &[width], Init::Zeros)?),
    );
    Ok(ProjectionHead { a, b, dim })
}

/// Creates the projection-head parameters: the `U_A` half random, the `U_B`
/// half zero, so every generated bundle is zero until the first update.
pub fn init_projection_heads(cfg: &HypernetConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = substream(seed, "hypernet.heads");
    let mut pb = ParamBuilder::new(&mut store, Some(&mut rng), false);
    let mut pb = pb.pp(PREFIX);
    for (i, &d) in cfg.host_layer_dims.iter().enumerate() {
        build_head(&mut pb.pp(format!("heads.{i}")), cfg.fuse_dim, d, cfg.lora_rank)?;
    }
    Ok(store)
}

pub struct Hypernetwork {
    cfg: HypernetConfig,
    store: ParamStore,
    encoder: PatchEncoder,
    fuse: Linear,
    queries: DecoderQueries,
    decoder: Vec<DecoderBlock>,
    dec_norm: LayerNorm,
    heads: Vec<ProjectionHead>,
}

impl Hypernetwork {
    /// Fresh, seeded parameters (pretrained encoder tensors loaded when configured).
    pub fn init(cfg: &HypernetConfig, seed: u64) -> Result<Self> {
        let mut store = init_projection_heads(cfg, seed)?;
        if let Some(path) = &cfg.pretrained_encoder {
            let (tensors, _) = load_checkpoint(path)?;
            let prefix = format!("{PREFIX}.encoder.");
            let enc: Vec<_> = tensors
                .into_iter()
                .filter(|t| t.name.starts_with(&prefix))
                .collect();
            if enc.is_empty() {
                return Err(LocError::Manifest(format!(
                    "{} holds no `{prefix}*` tensors",
                    path.display()
                )));
            }
            let loaded = ParamStore::from_named(&enc, &Device::Cpu)?;
            store = merge(store, loaded)?;
        }
        let mut rng = substream(seed, "hypernet.body");
        Self::build(cfg, store, Some(&mut rng))
    }

    /// Rebuilds from a store holding every `hypernet.*` parameter.
    pub fn from_store(cfg: &HypernetConfig, store: ParamStore) -> Result<Self> {
        Self::build(cfg, store, None)
    }

    fn build(
        cfg: &HypernetConfig,
        mut store: ParamStore,
        rng: Option<&mut crate::rng::Rng>,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut root = ParamBuilder::new(&mut store, rng, false);
        let mut pb = root.pp(PREFIX);
        let encoder = PatchEncoder::new(&mut pb.pp("encoder"), cfg)?;
        let fuse = Linear::new(&mut pb.pp("fuse"), 2 * cfg.enc_dim, cfg.fuse_dim, true)?;
        let queries = DecoderQueries {
            q: pb.tensor("queries", &[cfg.num_queries, cfg.fuse_dim], Init::Normal(1.0))?,
        };
        let decoder = (0..cfg.dec_blocks)
            .map(|i| DecoderBlock::new(&mut pb.pp(format!("decoder.{i}")), cfg.fuse_dim, cfg.dec_heads))
            .collect::<Result<_>>()?;
        let dec_norm = LayerNorm::new(&mut pb.pp("decoder_norm"), cfg.fuse_dim)?;
        let heads = cfg
            .host_layer_dims
            .iter()
            .enumerate()
            .map(|(i, &d)| build_head(&mut pb.pp(format!("heads.{i}")), cfg.fuse_dim, d, cfg.lora_rank))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder,
            fuse,
            queries,
            decoder,
            dec_norm,
            heads,
        })
    }

    pub fn config(&self) -> &HypernetConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn encoder(&self) -> &PatchEncoder {
        &self.encoder
    }

    pub fn queries(&self) -> &DecoderQueries {
        &self.queries
    }

    fn check_images(&self, t: &Tensor, what: &str) -> Result<()> {
        let s = self.cfg.image_size;
        match t.dims() {
            [_, h, w, c] if *h == s && *w == s && *c == CHANNELS => Ok(()),
            d => Err(LocError::Shape(format!(
                "{what} is {d:?}, hypernetwork expects Bx{s}x{s}x{CHANNELS}"
            ))),
        }
    }

    /// `𝒫(concat(ℰ(A), ℰ(A′)))` with the encoder shared between both images.
    pub fn encode_instruction(&self, before: &Tensor, after: &Tensor) -> Result<InstructionFeature> {
        self.check_images(before, "before-image batch")?;
        self.check_images(after, "after-image batch")?;
        let n = before.dim(0)?;
        if after.dim(0)? != n {
            return Err(LocError::Shape("before/after batch sizes differ".into()));
        }
        let both = self.encoder.forward(&Tensor::cat(&[before, after], 0)?)?;
        let f_a = both.narrow(0, 0, n)?;
        let f_ap = both.narrow(0, n, n)?;
        let tokens = self.fuse.forward(&Tensor::cat(&[&f_a, &f_ap], 2)?)?;
        Ok(InstructionFeature { tokens })
    }

    /// Decodes one primitive feature per host layer and projects each into the
    /// eight factors of that layer.
    pub fn generate_lora(&self, f: &InstructionFeature) -> Result<LoRABundle> {
        let (n, _, width) = f.tokens.dims3()?;
        if width != self.cfg.fuse_dim {
            return Err(LocError::Shape(format!(
                "instruction feature width {width}, decoder expects {}",
                self.cfg.fuse_dim
            )));
        }
        if self.heads.len() != self.cfg.host_layer_dims.len() {
            return Err(LocError::Config("head count differs from host layer count".into()));
        }
        let mut q = self
            .queries
            .q
            .unsqueeze(0)?
            .broadcast_as((n, self.cfg.num_queries, width))?
            .contiguous()?;
        for block in &self.decoder {
            q = block.forward(&q, &f.tokens)?;
        }
        let prim = self.dec_norm.forward(&q)?;
        let r = self.cfg.lora_rank;
        let mut layers = Vec::with_capacity(self.heads.len());
        for (i, head) in self.heads.iter().enumerate() {
            let p = prim.narrow(1, i, 1)?.squeeze(1)?;
            let d = head.dim;
            // Keeps x·U_A at unit scale for unit-scale activations, as with a
            // conventionally initialised adapter.
            let a = (head.a.forward(&p)? * (1.0 / (d as f64).sqrt()))?.reshape((n, 4, d, r))?;
            let b = head.b.forward(&p)?.reshape((n, 4, r, d))?;
            let slot = |k: usize| -> Result<SlotFactors> {
                Ok(SlotFactors {
                    a: a.narrow(1, k, 1)?.squeeze(1)?,
                    b: b.narrow(1, k, 1)?.squeeze(1)?,
                })
            };
            layers.push(LayerDelta::new([slot(0)?, slot(1)?, slot(2)?, slot(3)?])?);
        }
        LoRABundle::new(layers)
    }

    /// `ℋ(A, A′)`.
    pub fn forward(&self, before: &Tensor, after: &Tensor) -> Result<LoRABundle> {
        self.generate_lora(&self.encode_instruction(before, after)?)
    }
}

fn merge(mut into: ParamStore, from: ParamStore) -> Result<ParamStore> {
    let mut named = into.to_named()?;
    named.extend(from.to_named()?);
    into = ParamStore::from_named(&named, &Device::Cpu)?;
    Ok(into)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{effective_delta, validate_zero_init, Slot};
    use crate::rng::normal_vec;

    pub(crate) fn toy_config() -> HypernetConfig {
        HypernetConfig {
            image_size: 16,
            patch_size: 4,
            enc_dim: 16,
            enc_depth: 1,
            enc_heads: 2,
            fuse_dim: 16,
            num_queries: 2,
            dec_blocks: 1,
            dec_heads: 2,
            lora_rank: 2,
            host_layer_dims: vec![8, 12],
            pretrained_encoder: None,
        }
    }

    fn images(seed: u64, n: usize, size: usize) -> Tensor {
        let mut rng = substream(seed, "img");
        Tensor::from_vec(normal_vec(&mut rng, n * size * size * 3), (n, size, size, 3), &Device::Cpu)
            .unwrap()
            .clamp(-1f32, 1f32)
            .unwrap()
    }

    #[test]
    fn vit_base_dimensions_give_196_by_512() {
        let cfg = HypernetConfig {
            image_size: 224,
            patch_size: 16,
            enc_dim: 768,
            enc_depth: 1,
            enc_heads: 8,
            fuse_dim: 512,
            num_queries: 1,
            dec_blocks: 1,
            dec_heads: 8,
            lora_rank: 4,
            host_layer_dims: vec![320],
            pretrained_encoder: None,
        };
        let h = Hypernetwork::init(&cfg, 0).unwrap();
        let x = images(1, 1, 224);
        let f = h.encode_instruction(&x, &x).unwrap();
        assert_eq!(f.tokens.dims(), &[1, 196, 512]);
        let b = h.generate_lora(&f).unwrap();
        let l = &b.layers()[0];
        assert_eq!(l.slot(Slot::Query).a.dims(), &[1, 320, 4]);
        assert_eq!(l.slot(Slot::Output).b.dims(), &[1, 4, 320]);
        assert_eq!(h.store().get("hypernet.heads.0.a.w").unwrap().dims(), &[512, 8 * 320 * 4 / 2]);
    }

    #[test]
    fn toy_token_count() {
        let cfg = HypernetConfig {
            image_size: 64,
            patch_size: 8,
            ..toy_config()
        };
        assert_eq!(cfg.token_count(), 64);
        let h = Hypernetwork::init(&cfg, 0).unwrap();
        let x = images(2, 2, 64);
        let f = h.encode_instruction(&x, &x).unwrap();
        assert_eq!(f.tokens.dims(), &[2, 64, 16]);
    }

    #[test]
    fn fresh_bundle_is_zero_but_down_factors_are_not() {
        let h = Hypernetwork::init(&toy_config(), 4).unwrap();
        let (a, ap) = (images(1, 3, 16), images(2, 3, 16));
        let b = h.forward(&a, &ap).unwrap();
        assert_eq!(b.len(), 2);
        assert!(validate_zero_init(&b).unwrap());
        for l in b.layers() {
            for slot in Slot::ALL {
                let e = effective_delta(l, slot).unwrap().abs().unwrap().max_all().unwrap();
                assert_eq!(e.to_scalar::<f32>().unwrap(), 0.0);
                let ua = l.slot(slot).a.abs().unwrap().min_all().unwrap();
                assert!(ua.to_scalar::<f32>().unwrap() > 0.0);
            }
        }
    }

    #[test]
    fn init_is_seeded_and_deterministic() {
        let cfg = toy_config();
        let h1 = Hypernetwork::init(&cfg, 9).unwrap();
        let h2 = Hypernetwork::init(&cfg, 9).unwrap();
        assert_eq!(h1.store().to_named().unwrap(), h2.store().to_named().unwrap());
        let heads = init_projection_heads(&cfg, 9).unwrap();
        assert_eq!(heads.len(), 8);
        let x = images(3, 2, 16);
        let f1 = h1.encode_instruction(&x, &x).unwrap().tokens.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let f2 = h1.encode_instruction(&x, &x).unwrap().tokens.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(f1, f2);
    }

    #[test]
    fn config_mismatches_are_rejected() {
        let mut cfg = toy_config();
        cfg.num_queries = 3;
        assert!(Hypernetwork::init(&cfg, 0).is_err());
        let h = Hypernetwork::init(&toy_config(), 0).unwrap();
        let wrong = images(1, 1, 32);
        assert!(h.encode_instruction(&wrong, &wrong).is_err());
    }
}
