use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{LocError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// β linearly spaced in [1e-4, 0.02].
    LinearBeta,
    /// Squared-cosine ᾱ with β capped at 0.999.
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::LinearBeta,
            steps: 1000,
        }
    }
}

/// Cumulative signal coefficients `ᾱ_0 = 1 > ᾱ_1 > … > ᾱ_T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps < 1 {
            return Err(LocError::Config("schedule needs at least one step".into()));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::LinearBeta => {
                let (lo, hi) = (1e-4, 0.02);
                (0..steps)
                    .map(|i| {
                        if steps == 1 {
                            lo
                        } else {
                            lo + (hi - lo) * i as f64 / (steps - 1) as f64
                        }
                    })
                    .collect()
            }
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    let s = 0.008;
                    (((t / steps as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2)
                        .cos()
                        .powi(2)
                };
                (0..steps)
                    .map(|i| (1.0 - f(i as f64 + 1.0) / f(i as f64)).min(0.999))
                    .collect()
            }
        };
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for b in betas {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * (1.0 - b));
        }
        Ok(Self { kind, alpha_bar })
    }

    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        Self::build(cfg.steps, cfg.kind)
    }

    /// Schedule with explicit coefficients; `alpha_bar[0]` must be 1.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 || alpha_bar[0] != 1.0 {
            return Err(LocError::Config("alpha_bar must start at 1 and have T >= 1".into()));
        }
        Ok(Self {
            kind: ScheduleKind::LinearBeta,
            alpha_bar,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or(LocError::TimestepOutOfRange {
                t,
                max: self.steps(),
            })
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn add_noise(x0: &Tensor, eps: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    if x0.dims() != eps.dims() {
        return Err(LocError::Shape(format!(
            "x0 {:?} vs noise {:?}",
            x0.dims(),
            eps.dims()
        )));
    }
    let ab = sched.alpha_bar(t)?;
    Ok((x0.affine(ab.sqrt(), 0.0)? + eps.affine((1.0 - ab).sqrt(), 0.0)?)?)
}

/// Per-sample timesteps over the leading axis of `x0`.
pub fn add_noise_batch(
    x0: &Tensor,
    eps: &Tensor,
    ts: &[usize],
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if x0.dims() != eps.dims() || x0.dim(0)? != ts.len() {
        return Err(LocError::Shape(format!(
            "x0 {:?}, noise {:?}, {} timesteps",
            x0.dims(),
            eps.dims(),
            ts.len()
        )));
    }
    let mut shape = vec![1usize; x0.rank()];
    shape[0] = ts.len();
    let mut sig = Vec::with_capacity(ts.len());
    let mut noise = Vec::with_capacity(ts.len());
    for &t in ts {
        let ab = sched.alpha_bar(t)?;
        sig.push(ab.sqrt() as f32);
        noise.push((1.0 - ab).sqrt() as f32);
    }
    let sig = Tensor::from_vec(sig, shape.as_slice(), &Device::Cpu)?;
    let noise = Tensor::from_vec(noise, shape.as_slice(), &Device::Cpu)?;
    Ok((x0.broadcast_mul(&sig)? + eps.broadcast_mul(&noise)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_monotonicity() {
        for kind in [ScheduleKind::LinearBeta, ScheduleKind::Cosine] {
            let s = NoiseSchedule::build(1000, kind).unwrap();
            assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
            assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
            let last = s.alpha_bar(1000).unwrap();
            assert!(last > 0.0 && last <= 0.05, "{kind:?}: {last}");
        }
        let s = NoiseSchedule::build(1000, ScheduleKind::LinearBeta).unwrap();
        assert!((s.alpha_bar(1).unwrap() - 0.9999).abs() < 1e-12);
        assert!(NoiseSchedule::build(0, ScheduleKind::Cosine).is_err());
        assert!(s.alpha_bar(1001).is_err());
    }

    #[test]
    fn add_noise_endpoints() {
        let dev = Device::Cpu;
        let x0 = Tensor::new(&[1.0f32], &dev).unwrap();
        let eps = Tensor::new(&[0.0f32], &dev).unwrap();
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.25, 0.0]).unwrap();
        let at = |t| add_noise(&x0, &eps, t, &s).unwrap().to_vec1::<f32>().unwrap()[0];
        assert_eq!(at(0), 1.0);
        assert_eq!(at(1), 0.5);
        let e = Tensor::new(&[0.3f32], &dev).unwrap();
        assert_eq!(add_noise(&x0, &e, 2, &s).unwrap().to_vec1::<f32>().unwrap()[0], 0.3);
        assert!(add_noise(&x0, &e, 3, &s).is_err());
    }
}
