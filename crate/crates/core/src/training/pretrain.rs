use candle_core::{Device, Tensor};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::optim::{AdamW, AdamWConfig};
use crate::datamodel::stack_images;
use crate::diffusion::{add_noise_batch, Conditioning, EditUnet, GeneratorConfig, NoiseSchedule};
use crate::error::{LocError, Result};
use crate::rng::{normal_vec, substream_indexed};
use crate::synthdata::{descriptor, PairRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Every `null_every`-th step trains the null context as the identity edit.
    pub null_every: u64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 16,
            lr: 1e-3,
            null_every: 4,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || self.null_every == 0 {
            return Err(LocError::Config(
                "pretraining needs batch_size > 0, lr > 0 and null_every > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Trains Θ as a descriptor-conditioned paired editor on `records`, with
/// random horizontal flips. The null context learns to reproduce its
/// condition image, so an empty bundle leaves queries unedited.
///
/// Returns the trainable generator and the per-step loss.
pub fn pretrain_generator(
    records: &[PairRecord],
    gcfg: &GeneratorConfig,
    cfg: &PretrainConfig,
    sched: &NoiseSchedule,
) -> Result<(EditUnet, Vec<f32>)> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(LocError::Dataset("generator pretraining needs at least one pair".into()));
    }
    let model = EditUnet::init(gcfg, cfg.seed)?;
    let mut opt = AdamW::new(AdamWConfig::with_lr(cfg.lr));
    let dev = Device::Cpu;
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let mut rng = substream_indexed(cfg.seed, "pretrain.step", step);
        let null = step % cfg.null_every == cfg.null_every - 1;
        let mut conds = Vec::with_capacity(cfg.batch_size);
        let mut targets = Vec::with_capacity(cfg.batch_size);
        let mut descs = Vec::with_capacity(cfg.batch_size * crate::diffusion::DESCRIPTOR_DIM);
        for _ in 0..cfg.batch_size {
            let r = &records[rng.gen_range(0..records.len())];
            let flip: bool = rng.gen();
            let (b, bp) = if flip {
                (r.before.hflip(), r.after.hflip())
            } else {
                (r.before.clone(), r.after.clone())
            };
            descs.extend(descriptor(&r.meta.transform, &r.meta.scene, flip)?);
            targets.push(if null { b.clone() } else { bp });
            conds.push(b);
        }
        let cond = stack_images(&conds.iter().collect::<Vec<_>>(), &dev)?;
        let x0 = stack_images(&targets.iter().collect::<Vec<_>>(), &dev)?;
        let ts: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(1..=sched.steps())).collect();
        let eps = Tensor::from_vec(normal_vec(&mut rng, x0.elem_count()), x0.dims(), &dev)?;
        let x_t = add_noise_batch(&x0, &eps, &ts, sched)?;
        let desc = Tensor::from_vec(descs, (cfg.batch_size, crate::diffusion::DESCRIPTOR_DIM), &dev)?;
        let context = if null {
            Conditioning::Null
        } else {
            Conditioning::Descriptors(&desc)
        };
        let pred = model.predict_x0(&x_t, &ts, &cond, context, None)?;
        let loss = (pred - &x0)?.sqr()?.mean_all()?;
        let value = loss.to_scalar::<f32>()?;
        if !value.is_finite() {
            return Err(LocError::Divergence {
                step,
                what: format!("generator pretraining loss is {value}"),
            });
        }
        opt.step(model.store(), &loss.backward()?, step)?;
        losses.push(value);
        if step % 100 == 0 {
            log::info!("pretrain step {step}: loss {value:.5}");
        }
    }
    Ok((model, losses))
}
