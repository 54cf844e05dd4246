use candle_core::{Device, Tensor};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datamodel::{stack_images, EditSample, ImageTensor, Provenance};
use crate::diffusion::{add_noise_batch, Conditioning, EditUnet, NoiseSchedule};
use crate::error::{LocError, Result};
use crate::hypernetwork::Hypernetwork;
use crate::lora::{negate_bundle, LoRABundle};
use crate::rng::{normal_vec, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub forward_term: f64,
    pub reverse_term: f64,
    pub total: f64,
}

/// Builds a training quad from a pair: one coin per call decides whether the
/// query/target are the flipped pair or the pair itself.
pub fn make_paired_quad(before: &ImageTensor, after: &ImageTensor, rng: &mut Rng) -> Result<EditSample> {
    if before.size() != after.size() {
        return Err(LocError::Shape(format!(
            "before is {0}x{0}, after is {1}x{1}",
            before.size(),
            after.size()
        )));
    }
    let flip: bool = rng.gen();
    let (query, target) = if flip {
        (before.hflip(), after.hflip())
    } else {
        (before.clone(), after.clone())
    };
    Ok(EditSample {
        before: before.clone(),
        after: after.clone(),
        query,
        target,
        provenance: Provenance::FlipPaired,
        transform_id: None,
    })
}

/// With probability `prob` swaps both pairs, so the instruction runs backwards.
pub fn exchange_pair(sample: EditSample, rng: &mut Rng, prob: f64) -> Result<EditSample> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(LocError::Config(format!("exchange probability {prob} outside [0, 1]")));
    }
    // Always consume one draw so the stream does not depend on `prob`.
    let u: f64 = rng.gen();
    Ok(if u < prob {
        EditSample {
            before: sample.after,
            after: sample.before,
            query: sample.target,
            target: sample.query,
            ..sample
        }
    } else {
        sample
    })
}

/// A batch of quads as `B×H×W×C` tensors.
pub struct QuadBatch {
    pub before: Tensor,
    pub after: Tensor,
    pub query: Tensor,
    pub target: Tensor,
}

impl QuadBatch {
    pub fn from_samples(samples: &[EditSample]) -> Result<Self> {
        let dev = Device::Cpu;
        let col = |f: fn(&EditSample) -> &ImageTensor| -> Result<Tensor> {
            stack_images(&samples.iter().map(f).collect::<Vec<_>>(), &dev)
        };
        Ok(Self {
            before: col(|s| &s.before)?,
            after: col(|s| &s.after)?,
            query: col(|s| &s.query)?,
            target: col(|s| &s.target)?,
        })
    }

    pub fn len(&self) -> usize {
        self.before.dim(0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Timesteps and noise for both loss terms.
#[derive(Clone, Debug)]
pub struct LossDraws {
    pub t_forward: Vec<usize>,
    pub eps_forward: Tensor,
    pub t_reverse: Vec<usize>,
    pub eps_reverse: Tensor,
}

impl LossDraws {
    /// Independent `(t, ε)` for the forward and the reverse term, `t ∈ [1, T]`.
    pub fn sample(rng: &mut Rng, dims: &[usize], total_steps: usize) -> Result<Self> {
        let batch = dims[0];
        let n: usize = dims.iter().product();
        let dev = Device::Cpu;
        let t_forward = (0..batch).map(|_| rng.gen_range(1..=total_steps)).collect();
        let eps_forward = Tensor::from_vec(normal_vec(rng, n), dims, &dev)?;
        let t_reverse = (0..batch).map(|_| rng.gen_range(1..=total_steps)).collect();
        let eps_reverse = Tensor::from_vec(normal_vec(rng, n), dims, &dev)?;
        Ok(Self {
            t_forward,
            eps_forward,
            t_reverse,
            eps_reverse,
        })
    }

    /// The same draws with the roles of the two terms exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            t_forward: self.t_reverse.clone(),
            eps_forward: self.eps_reverse.clone(),
            t_reverse: self.t_forward.clone(),
            eps_reverse: self.eps_forward.clone(),
        }
    }
}

/// The frozen generator as seen by the loss.
pub trait Generator {
    fn predict(&self, x_t: &Tensor, ts: &[usize], cond: &Tensor, bundle: &LoRABundle) -> Result<Tensor>;
}

impl Generator for EditUnet {
    fn predict(&self, x_t: &Tensor, ts: &[usize], cond: &Tensor, bundle: &LoRABundle) -> Result<Tensor> {
        self.predict_x0(x_t, ts, cond, Conditioning::Null, Some(bundle))
    }
}

fn reconstruction(
    model: &impl Generator,
    sched: &NoiseSchedule,
    cond: &Tensor,
    x0: &Tensor,
    bundle: &LoRABundle,
    ts: &[usize],
    eps: &Tensor,
) -> Result<Tensor> {
    let x_t = add_noise_batch(x0, eps, ts, sched)?;
    let pred = model.predict(&x_t, ts, cond, bundle)?;
    Ok((x0 - pred)?.sqr()?.mean_all()?)
}

/// The two reconstruction terms for a given bundle: `B → B′` with `Δ` and,
/// when `reverse` is set, `B′ → B` with `−Δ`. Returns `(forward, reverse)`;
/// the reverse term is an exact zero when disabled.
pub fn dual_terms(
    query: &Tensor,
    target: &Tensor,
    bundle: &LoRABundle,
    model: &impl Generator,
    sched: &NoiseSchedule,
    draws: &LossDraws,
    reverse: bool,
) -> Result<(Tensor, Tensor)> {
    let fwd = reconstruction(model, sched, query, target, bundle, &draws.t_forward, &draws.eps_forward)?;
    let rev = if reverse {
        let neg = negate_bundle(bundle)?;
        reconstruction(model, sched, target, query, &neg, &draws.t_reverse, &draws.eps_reverse)?
    } else {
        Tensor::zeros((), candle_core::DType::F32, &Device::Cpu)?
    };
    Ok((fwd, rev))
}

/// The LoC objective on one batch. Returns the differentiable total and its report.
pub fn loc_loss(
    batch: &QuadBatch,
    hypernet: &Hypernetwork,
    model: &impl Generator,
    sched: &NoiseSchedule,
    draws: &LossDraws,
    reverse: bool,
    step: u64,
) -> Result<(Tensor, LossReport)> {
    let bundle = hypernet.forward(&batch.before, &batch.after)?;
    let (fwd, rev) = dual_terms(&batch.query, &batch.target, &bundle, model, sched, draws, reverse)?;
    let total = (&fwd + &rev)?;
    let report = LossReport {
        step,
        forward_term: f64::from(fwd.to_scalar::<f32>()?),
        reverse_term: f64::from(rev.to_scalar::<f32>()?),
        total: f64::from(total.to_scalar::<f32>()?),
    };
    if !report.total.is_finite() {
        return Err(LocError::Divergence {
            step,
            what: format!("loss is {}", report.total),
        });
    }
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn asymmetric(size: usize) -> ImageTensor {
        let data = (0..size * size * 3).map(|i| (i % 7) as f32 / 7.0 - 0.5).collect();
        ImageTensor::new(size, data).unwrap()
    }

    #[test]
    fn paired_quad_is_plain_or_exact_flip() {
        let a = asymmetric(6);
        let ap = a.map_pixels(|p| p.map(|v| -v));
        let mut rng = substream(3, "coin");
        let mut seen = [false; 2];
        for _ in 0..32 {
            let s = make_paired_quad(&a, &ap, &mut rng).unwrap();
            s.validate().unwrap();
            if s.query == a {
                assert_eq!(s.target, ap);
                seen[0] = true;
            } else {
                assert_eq!(s.query, a.hflip());
                assert_eq!(s.target, ap.hflip());
                seen[1] = true;
            }
        }
        assert_eq!(seen, [true, true]);
    }

    #[test]
    fn exchange_extremes() {
        let a = asymmetric(4);
        let ap = a.map_pixels(|p| p.map(|v| v * 0.5));
        let mut rng = substream(1, "q");
        let s = make_paired_quad(&a, &ap, &mut rng).unwrap();
        let mut r = substream(2, "x");
        for _ in 0..8 {
            assert_eq!(exchange_pair(s.clone(), &mut r, 0.0).unwrap(), s);
        }
        let once = exchange_pair(s.clone(), &mut r, 1.0).unwrap();
        assert_eq!(once.before, s.after);
        assert_eq!(once.query, s.target);
        assert_eq!(exchange_pair(once, &mut r, 1.0).unwrap(), s);
        assert!(exchange_pair(s, &mut r, 1.5).is_err());
    }

    #[test]
    fn exchange_pattern_is_seeded() {
        let a = asymmetric(4);
        let ap = a.hflip();
        let s = make_paired_quad(&a, &ap, &mut substream(0, "q")).unwrap();
        let pattern = |seed| {
            let mut r = substream(seed, "x");
            (0..16)
                .map(|_| exchange_pair(s.clone(), &mut r, 0.5).unwrap().before == s.after)
                .collect::<Vec<_>>()
        };
        assert_eq!(pattern(5), pattern(5));
    }
}
