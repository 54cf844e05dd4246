use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::datamodel::NamedTensor;
use crate::error::{LocError, Result};
use crate::nn::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay. Moments are kept per parameter name so
/// they can be checkpointed next to the parameters.
pub struct AdamW {
    cfg: AdamWConfig,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

const STATE_PREFIX: &str = "adamw";

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Updates every parameter of `store` that received a gradient. Fails
    /// before touching anything if a gradient is not finite.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, step: u64) -> Result<()> {
        let mut live = Vec::new();
        for (name, var) in store.iter() {
            if let Some(g) = grads.get(var.as_tensor()) {
                let s = g.sqr()?.sum_all()?.to_scalar::<f32>()?;
                if !s.is_finite() {
                    return Err(LocError::Divergence {
                        step,
                        what: format!("gradient of `{name}` is not finite"),
                    });
                }
                // Gradients still reference the graph that produced them.
                live.push((name, var, g.detach()));
            }
        }
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (name, var, g) in live {
            let g = &g;
            let m = match self.m.get(name) {
                Some(m) => ((m * c.beta1)? + (g * (1.0 - c.beta1))?)?,
                None => (g * (1.0 - c.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?,
                None => (g.sqr()? * (1.0 - c.beta2))?,
            };
            let denom = ((&v / bc2)?.sqrt()? + c.eps)?;
            let update = ((&m / bc1)? / denom)?;
            let theta = var.as_tensor().detach();
            let next = ((theta * (1.0 - c.lr * c.weight_decay))? - (update * c.lr)?)?;
            var.set(&next)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    pub fn to_named(&self) -> Result<Vec<NamedTensor>> {
        let mut out = Vec::new();
        for (kind, map) in [("m", &self.m), ("v", &self.v)] {
            for (name, t) in map {
                out.push(NamedTensor::new(
                    format!("{STATE_PREFIX}.{kind}.{name}"),
                    t.dims().to_vec(),
                    t.flatten_all()?.to_vec1::<f32>()?,
                )?);
            }
        }
        out.push(NamedTensor::new(
            format!("{STATE_PREFIX}.t"),
            vec![1],
            vec![self.t as f32],
        )?);
        Ok(out)
    }

    /// Restores moments written by [`AdamW::to_named`]; other tensors are ignored.
    pub fn from_named(cfg: AdamWConfig, tensors: &[NamedTensor]) -> Result<Self> {
        let mut opt = Self::new(cfg);
        for t in tensors {
            let Some(rest) = t.name.strip_prefix(STATE_PREFIX).and_then(|r| r.strip_prefix('.')) else {
                continue;
            };
            if rest == "t" {
                opt.t = t.data[0] as u64;
                continue;
            }
            let tensor = Tensor::from_vec(t.data.clone(), t.shape.as_slice(), &candle_core::Device::Cpu)?;
            if let Some(name) = rest.strip_prefix("m.") {
                opt.m.insert(name.to_string(), tensor);
            } else if let Some(name) = rest.strip_prefix("v.") {
                opt.v.insert(name.to_string(), tensor);
            } else {
                return Err(LocError::Manifest(format!("unknown optimizer tensor `{}`", t.name)));
            }
        }
        Ok(opt)
    }
}
