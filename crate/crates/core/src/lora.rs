//! Instruction-specific LoRA bundles.
//!
//! A [`LoRABundle`] holds one [`LayerDelta`] per host attention layer, in host
//! traversal order. Each layer carries low-rank factors `U_A` (d×r) and `U_B`
//! (r×d) for the query, key, value and output projections, so the adapted
//! projection is `x·(W + U_A·U_B)`.
//!
//! Factors carry a leading instruction axis `n`: a bundle generated for a batch
//! of before/after pairs stores `n` independent adapters side by side. A bundle
//! with `n = 1` broadcasts over any batch of activations.

use candle_core::{Device, Tensor};

use crate::datamodel::NamedTensor;
use crate::error::{LocError, Result};
use crate::nn::matmul_last;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Slot {
    Query,
    Key,
    Value,
    Output,
}

impl Slot {
    pub const ALL: [Slot; 4] = [Slot::Query, Slot::Key, Slot::Value, Slot::Output];

    pub fn name(self) -> &'static str {
        match self {
            Slot::Query => "query",
            Slot::Key => "key",
            Slot::Value => "value",
            Slot::Output => "output",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// `U_A` is `n×d×r`, `U_B` is `n×r×d`.
#[derive(Clone, Debug)]
pub struct SlotFactors {
    pub a: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Debug)]
pub struct LayerDelta {
    slots: [SlotFactors; 4],
    count: usize,
    dim: usize,
    rank: usize,
}

impl LayerDelta {
    /// Factors in [`Slot::ALL`] order.
    pub fn new(slots: [SlotFactors; 4]) -> Result<Self> {
        let (count, dim, rank) = slots[0].a.dims3()?;
        for (k, f) in Slot::ALL.iter().zip(&slots) {
            let a = f.a.dims3()?;
            let b = f.b.dims3()?;
            if a != (count, dim, rank) || b != (count, rank, dim) {
                return Err(LocError::Shape(format!(
                    "slot {}: U_A {a:?}, U_B {b:?}, expected ({count}, {dim}, {rank}) and ({count}, {rank}, {dim})",
                    k.name()
                )));
            }
        }
        Ok(Self {
            slots,
            count,
            dim,
            rank,
        })
    }

    pub fn zeros(count: usize, dim: usize, rank: usize, device: &Device) -> Result<Self> {
        let f = || -> Result<SlotFactors> {
            Ok(SlotFactors {
                a: Tensor::zeros((count, dim, rank), candle_core::DType::F32, device)?,
                b: Tensor::zeros((count, rank, dim), candle_core::DType::F32, device)?,
            })
        };
        Self::new([f()?, f()?, f()?, f()?])
    }

    pub fn slot(&self, slot: Slot) -> &SlotFactors {
        &self.slots[slot.index()]
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    fn map(&self, f: impl Fn(&SlotFactors) -> Result<SlotFactors>) -> Result<Self> {
        let s = &self.slots;
        Self::new([f(&s[0])?, f(&s[1])?, f(&s[2])?, f(&s[3])?])
    }
}

#[derive(Clone, Debug)]
pub struct LoRABundle {
    layers: Vec<LayerDelta>,
}

impl LoRABundle {
    pub fn new(layers: Vec<LayerDelta>) -> Result<Self> {
        if let Some(first) = layers.first() {
            if let Some(bad) = layers.iter().find(|l| l.count != first.count) {
                return Err(LocError::Shape(format!(
                    "layers disagree on instruction count: {} vs {}",
                    first.count, bad.count
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn zeros(dims: &[usize], rank: usize, count: usize, device: &Device) -> Result<Self> {
        let layers = dims
            .iter()
            .map(|&d| LayerDelta::zeros(count, d, rank, device))
            .collect::<Result<_>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[LayerDelta] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Number of instructions stacked in the bundle.
    pub fn count(&self) -> usize {
        self.layers.first().map_or(0, |l| l.count)
    }

    pub fn dims(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.dim).collect()
    }

    /// The `i`-th instruction as a single-instruction bundle.
    pub fn select(&self, i: usize) -> Result<Self> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                l.map(|f| {
                    Ok(SlotFactors {
                        a: f.a.narrow(0, i, 1)?,
                        b: f.b.narrow(0, i, 1)?,
                    })
                })
            })
            .collect::<Result<_>>()?;
        Self::new(layers)
    }

    /// Cuts every factor out of the autograd graph.
    pub fn detach(&self) -> Result<Self> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                l.map(|f| {
                    Ok(SlotFactors {
                        a: f.a.detach(),
                        b: f.b.detach(),
                    })
                })
            })
            .collect::<Result<_>>()?;
        Self::new(layers)
    }

    fn map_up(&self, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Self> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                l.map(|s| {
                    Ok(SlotFactors {
                        a: s.a.clone(),
                        b: f(&s.b)?,
                    })
                })
            })
            .collect::<Result<_>>()?;
        Self::new(layers)
    }

    /// Concatenation of every effective delta, flattened: `n × Σ 4·d_i²`.
    pub fn effective_flat(&self) -> Result<Tensor> {
        let n = self.count();
        let mut parts = Vec::with_capacity(self.layers.len() * 4);
        for l in &self.layers {
            for slot in Slot::ALL {
                parts.push(effective_delta(l, slot)?.reshape((n, l.dim * l.dim))?);
            }
        }
        Ok(Tensor::cat(&parts, 1)?)
    }

    /// Names `{prefix}layer{i}.{slot}.{A|B}`; requires a single instruction.
    pub fn to_named(&self, prefix: &str) -> Result<Vec<NamedTensor>> {
        if self.count() != 1 {
            return Err(LocError::Shape(format!(
                "only single-instruction bundles serialize, this one holds {}",
                self.count()
            )));
        }
        let mut out = Vec::with_capacity(self.layers.len() * 8);
        for (i, l) in self.layers.iter().enumerate() {
            for slot in Slot::ALL {
                let f = l.slot(slot);
                for (tag, t) in [("A", &f.a), ("B", &f.b)] {
                    let t = t.squeeze(0)?;
                    out.push(NamedTensor::new(
                        format!("{prefix}layer{i}.{}.{tag}", slot.name()),
                        t.dims().to_vec(),
                        t.flatten_all()?.to_vec1::<f32>()?,
                    )?);
                }
            }
        }
        Ok(out)
    }

    pub fn from_named(tensors: &[NamedTensor], prefix: &str, device: &Device) -> Result<Self> {
        let find = |name: String| -> Result<Tensor> {
            let t = tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| LocError::Manifest(format!("missing tensor `{name}`")))?;
            let mut shape = vec![1];
            shape.extend_from_slice(&t.shape);
            Ok(Tensor::from_slice(&t.data, shape, device)?)
        };
        let mut layers = Vec::new();
        while tensors
            .iter()
            .any(|t| t.name.starts_with(&format!("{prefix}layer{}.", layers.len())))
        {
            let i = layers.len();
            let f = |slot: Slot| -> Result<SlotFactors> {
                Ok(SlotFactors {
                    a: find(format!("{prefix}layer{i}.{}.A", slot.name()))?,
                    b: find(format!("{prefix}layer{i}.{}.B", slot.name()))?,
                })
            };
            layers.push(LayerDelta::new([
                f(Slot::Query)?,
                f(Slot::Key)?,
                f(Slot::Value)?,
                f(Slot::Output)?,
            ])?);
        }
        Self::new(layers)
    }
}

/// `U_A^k · U_B^k`, shape `n×d×d`.
pub fn effective_delta(ld: &LayerDelta, slot: Slot) -> Result<Tensor> {
    let f = ld.slot(slot);
    Ok(f.a.matmul(&f.b)?)
}

/// Flips the sign of every effective delta by negating `U_B` only.
pub fn negate_bundle(b: &LoRABundle) -> Result<LoRABundle> {
    b.map_up(|t| Ok(t.neg()?))
}

/// Scales every effective delta by `s` through `U_B`.
pub fn scale_bundle(b: &LoRABundle, s: f64) -> Result<LoRABundle> {
    if !s.is_finite() {
        return Err(LocError::Config(format!("non-finite bundle scale {s}")));
    }
    b.map_up(|t| Ok(t.affine(s, 0.0)?))
}

/// `x·W + (x·U_A)·U_B` for `x` of shape `B×N×d` and frozen `W` of shape `d×d`.
///
/// A single-instruction delta applies to every batch element; otherwise the
/// instruction count must equal the batch size.
pub fn injected_projection(
    x: &Tensor,
    w: &Tensor,
    delta: Option<&LayerDelta>,
    slot: Slot,
) -> Result<Tensor> {
    let base = matmul_last(x, w)?;
    let Some(ld) = delta else {
        return Ok(base);
    };
    let (batch, tokens, d) = x.dims3()?;
    if d != ld.dim {
        return Err(LocError::Shape(format!(
            "activations have width {d}, delta has {}",
            ld.dim
        )));
    }
    let f = ld.slot(slot);
    let x = x.contiguous()?;
    let low = if ld.count == batch {
        x.matmul(&f.a)?.matmul(&f.b)?
    } else if ld.count == 1 {
        x.reshape((1, batch * tokens, d))?
            .matmul(&f.a)?
            .matmul(&f.b)?
            .reshape((batch, tokens, d))?
    } else {
        return Err(LocError::Shape(format!(
            "bundle holds {} instructions for a batch of {batch}",
            ld.count
        )));
    };
    Ok((base + low)?)
}

/// True iff every `U_B` is exactly zero.
pub fn validate_zero_init(b: &LoRABundle) -> Result<bool> {
    for l in &b.layers {
        for slot in Slot::ALL {
            let v = l.slot(slot).b.flatten_all()?.to_vec1::<f32>()?;
            if v.iter().any(|x| *x != 0.0) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}
