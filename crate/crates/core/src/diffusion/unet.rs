//! Token-grid UNet generator Θ.
//!
//! The noisy image and the condition image are concatenated along channels and
//! cut into `patch×patch` patches, giving a `g×g` token grid (`g = size/patch`).
//! The down level runs one transformer block at `g×g`, 2×2 token merging goes
//! to the `g/2×g/2` middle level, and the up level splits back and fuses the
//! skip connection before its own block. Each block holds a self-attention and
//! a cross-attention layer; these six layers are the LoRA host layers, in the
//! order `down.self, down.cross, mid.self, mid.cross, up.self, up.cross`.
//!
//! The clean-image estimate is the condition image plus the decoded correction.
//!
//! Cross-attention reads one context token. Editing always uses the learned
//! null token; during generator pretraining the token can instead come from an
//! instruction descriptor, playing the role text plays in a text-instructed
//! editor.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::datamodel::CHANNELS;
use crate::error::{LocError, Result};
use crate::lora::LoRABundle;
use crate::nn::{
    patchify, timestep_embedding, unpatchify, Attention, FeedForward, Init, LayerNorm, Linear,
    ParamBuilder, ParamStore,
};
use crate::rng::{substream, Rng};

pub const PREFIX: &str = "unet";

/// Width of the instruction descriptor vectors used during pretraining.
pub const DESCRIPTOR_DIM: usize = 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub base_dim: usize,
    pub mid_dim: usize,
    pub heads: usize,
    pub context_dim: usize,
    pub time_dim: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            base_dim: 128,
            mid_dim: 128,
            heads: 4,
            context_dim: 64,
            time_dim: 64,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let g = self.image_size / self.patch_size.max(1);
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 || g % 2 != 0 {
            return Err(LocError::Config(format!(
                "image size {} must split into an even grid of {}-pixel patches",
                self.image_size, self.patch_size
            )));
        }
        if self.base_dim % self.heads != 0 || self.mid_dim % self.heads != 0 {
            return Err(LocError::Config("widths must divide by the head count".into()));
        }
        Ok(())
    }

    fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Host attention layers in traversal order.
    pub fn registry(&self) -> Vec<HostLayer> {
        let (b, m) = (self.base_dim, self.mid_dim);
        [
            ("down.self", b),
            ("down.cross", b),
            ("mid.self", m),
            ("mid.cross", m),
            ("up.self", b),
            ("up.cross", b),
        ]
        .into_iter()
        .map(|(name, dim)| HostLayer {
            name: name.to_string(),
            dim,
        })
        .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostLayer {
    pub name: String,
    pub dim: usize,
}

/// What the cross-attention layers read.
#[derive(Clone, Copy, Debug)]
pub enum Conditioning<'a> {
    Null,
    /// `B×DESCRIPTOR_DIM` instruction descriptors (pretraining only).
    Descriptors(&'a Tensor),
}

struct Block {
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    ctx: Linear,
    cross_attn: Attention,
    ln3: LayerNorm,
    ff: FeedForward,
    time: Linear,
}

impl Block {
    fn new(pb: &mut ParamBuilder, dim: usize, cfg: &GeneratorConfig) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(&mut pb.pp("ln1"), dim)?,
            self_attn: Attention::new(&mut pb.pp("self_attn"), dim, cfg.heads)?,
            ln2: LayerNorm::new(&mut pb.pp("ln2"), dim)?,
            ctx: Linear::new(&mut pb.pp("ctx"), cfg.context_dim, dim, false)?,
            cross_attn: Attention::new(&mut pb.pp("cross_attn"), dim, cfg.heads)?,
            ln3: LayerNorm::new(&mut pb.pp("ln3"), dim)?,
            ff: FeedForward::new(&mut pb.pp("ff"), dim, 2)?,
            time: Linear::new(&mut pb.pp("time"), cfg.time_dim, dim, true)?,
        })
    }

    fn forward(
        &self,
        x: &Tensor,
        temb: &Tensor,
        context: &Tensor,
        bundle: Option<&LoRABundle>,
        first_layer: usize,
    ) -> Result<Tensor> {
        let delta = |i: usize| bundle.map(|b| &b.layers()[first_layer + i]);
        let x = x.broadcast_add(&self.time.forward(temb)?.unsqueeze(1)?)?;
        let h = self.ln1.forward(&x)?;
        let x = (&x + self.self_attn.forward(&h, &h, delta(0))?)?;
        let ctx = self.ctx.forward(context)?;
        let x = (&x + self.cross_attn.forward(&self.ln2.forward(&x)?, &ctx, delta(1))?)?;
        Ok((&x + self.ff.forward(&self.ln3.forward(&x)?)?)?)
    }
}

/// The conditional x0-prediction generator.
pub struct EditUnet {
    cfg: GeneratorConfig,
    store: ParamStore,
    frozen: bool,
    embed: Linear,
    pos_hi: Tensor,
    pos_lo: Tensor,
    time_mlp: (Linear, Linear),
    null_context: Tensor,
    instruct: (Linear, Linear),
    down: Block,
    merge: Linear,
    mid: Block,
    split: Linear,
    skip: Linear,
    up: Block,
    out_norm: LayerNorm,
    out: Linear,
}

impl EditUnet {
    pub fn init(cfg: &GeneratorConfig, seed: u64) -> Result<Self> {
        let mut rng = substream(seed, "unet.init");
        Self::build(cfg, ParamStore::new(), Some(&mut rng), false)
    }

    /// Rebuilds from stored `unet.*` parameters. A frozen generator hands out
    /// detached weights, so no gradient ever reaches them.
    pub fn from_store(cfg: &GeneratorConfig, store: ParamStore, frozen: bool) -> Result<Self> {
        Self::build(cfg, store, None, frozen)
    }

    /// Same parameters, rebuilt frozen.
    pub fn into_frozen(self) -> Result<Self> {
        Self::build(&self.cfg.clone(), self.store, None, true)
    }

    fn build(
        cfg: &GeneratorConfig,
        mut store: ParamStore,
        rng: Option<&mut Rng>,
        frozen: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        let g = cfg.grid();
        let p = cfg.patch_size;
        let (b, m) = (cfg.base_dim, cfg.mid_dim);
        let mut root = ParamBuilder::new(&mut store, rng, frozen);
        let mut pb = root.pp(PREFIX);
        let embed = Linear::new(&mut pb.pp("embed"), p * p * 2 * CHANNELS, b, true)?;
        let pos_hi = pb.tensor("pos_hi", &[g * g, b], Init::Normal(0.02))?;
        let pos_lo = pb.tensor("pos_lo", &[g * g / 4, m], Init::Normal(0.02))?;
        let time_mlp = (
            Linear::new(&mut pb.pp("time_mlp.0"), cfg.time_dim, cfg.time_dim, true)?,
            Linear::new(&mut pb.pp("time_mlp.1"), cfg.time_dim, cfg.time_dim, true)?,
        );
        let null_context = pb.tensor("null_context", &[cfg.context_dim], Init::Normal(1.0))?;
        let instruct = (
            Linear::new(&mut pb.pp("instruct.0"), DESCRIPTOR_DIM, cfg.context_dim, true)?,
            Linear::new(&mut pb.pp("instruct.1"), cfg.context_dim, cfg.context_dim, true)?,
        );
        let down = Block::new(&mut pb.pp("down"), b, cfg)?;
        let merge = Linear::new(&mut pb.pp("merge"), 4 * b, m, true)?;
        let mid = Block::new(&mut pb.pp("mid"), m, cfg)?;
        let split = Linear::new(&mut pb.pp("split"), m, 4 * b, true)?;
        let skip = Linear::new(&mut pb.pp("skip"), 2 * b, b, true)?;
        let up = Block::new(&mut pb.pp("up"), b, cfg)?;
        let out_norm = LayerNorm::new(&mut pb.pp("out_norm"), b)?;
        let out = Linear::new(&mut pb.pp("out"), b, p * p * CHANNELS, true)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            frozen,
            embed,
            pos_hi,
            pos_lo,
            time_mlp,
            null_context,
            instruct,
            down,
            merge,
            mid,
            split,
            skip,
            up,
            out_norm,
            out,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn registry(&self) -> Vec<HostLayer> {
        self.cfg.registry()
    }

    fn context(&self, cond: Conditioning, batch: usize) -> Result<Tensor> {
        let c = self.cfg.context_dim;
        match cond {
            Conditioning::Null => Ok(self
                .null_context
                .reshape((1, 1, c))?
                .broadcast_as((batch, 1, c))?
                .contiguous()?),
            Conditioning::Descriptors(d) => {
                if d.dims() != [batch, DESCRIPTOR_DIM] {
                    return Err(LocError::Shape(format!(
                        "descriptors {:?}, expected [{batch}, {DESCRIPTOR_DIM}]",
                        d.dims()
                    )));
                }
                let h = self.instruct.0.forward(d)?.gelu()?;
                Ok(self.instruct.1.forward(&h)?.unsqueeze(1)?)
            }
        }
    }

    /// `Θ(x_t, t, cond, Δ)`: predicts the clean image for every batch element.
    pub fn predict_x0(
        &self,
        x_t: &Tensor,
        ts: &[usize],
        cond: &Tensor,
        context: Conditioning,
        bundle: Option<&LoRABundle>,
    ) -> Result<Tensor> {
        let s = self.cfg.image_size;
        let (batch, h, w, c) = x_t.dims4()?;
        if (h, w, c) != (s, s, CHANNELS) || cond.dims() != x_t.dims() {
            return Err(LocError::Shape(format!(
                "x_t {:?} and condition {:?} must both be Bx{s}x{s}x{CHANNELS}",
                x_t.dims(),
                cond.dims()
            )));
        }
        if ts.len() != batch {
            return Err(LocError::Shape(format!("{} timesteps for batch {batch}", ts.len())));
        }
        if let Some(b) = bundle {
            let want: Vec<usize> = self.registry().iter().map(|l| l.dim).collect();
            if b.dims() != want {
                return Err(LocError::Config(format!(
                    "bundle layer widths {:?} do not match host registry {want:?}",
                    b.dims()
                )));
            }
        }
        let g = self.cfg.grid();
        let temb = timestep_embedding(ts, self.cfg.time_dim, &Device::Cpu)?;
        let temb = self.time_mlp.1.forward(&self.time_mlp.0.forward(&temb)?.silu()?)?;
        let ctx = self.context(context, batch)?;

        let x = Tensor::cat(&[x_t, cond], 3)?;
        let x = self
            .embed
            .forward(&patchify(&x, self.cfg.patch_size)?)?
            .broadcast_add(&self.pos_hi)?;
        let hi = self.down.forward(&x, &temb, &ctx, bundle, 0)?;

        let grid = hi.reshape((batch, g, g, self.cfg.base_dim))?;
        let lo = self.merge.forward(&patchify(&grid, 2)?)?.broadcast_add(&self.pos_lo)?;
        let lo = self.mid.forward(&lo, &temb, &ctx, bundle, 2)?;

        let up = unpatchify(&self.split.forward(&lo)?, g / 2, 2)?.reshape((batch, g * g, self.cfg.base_dim))?;
        let up = self.skip.forward(&Tensor::cat(&[&up, &hi], 2)?)?;
        let up = self.up.forward(&up, &temb, &ctx, bundle, 4)?;

        let pix = self.out.forward(&self.out_norm.forward(&up)?)?;
        Ok((cond + unpatchify(&pix, g, self.cfg.patch_size)?)?)
    }
}
