use candle_core::{Device, Tensor};

use super::schedule::NoiseSchedule;
use super::unet::{Conditioning, EditUnet};
use crate::datamodel::{stack_images, unstack_images, ImageTensor};
use crate::error::{LocError, Result};
use crate::hypernetwork::Hypernetwork;
use crate::lora::LoRABundle;
use crate::rng::{normal_vec, substream};

/// Anything that predicts a clean image from a noisy one and a condition.
pub trait X0Predictor {
    fn predict_x0(&self, x_t: &Tensor, t: usize, cond: &Tensor) -> Result<Tensor>;
}

/// The generator with an optional injected bundle and the null context.
pub struct UnetPredictor<'a> {
    pub unet: &'a EditUnet,
    pub bundle: Option<&'a LoRABundle>,
}

impl X0Predictor for UnetPredictor<'_> {
    fn predict_x0(&self, x_t: &Tensor, t: usize, cond: &Tensor) -> Result<Tensor> {
        let ts = vec![t; x_t.dim(0)?];
        self.unet
            .predict_x0(x_t, &ts, cond, Conditioning::Null, self.bundle)
    }
}

/// Uniformly strided grid `T = t_0 > t_1 > … > t_steps = 0`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(LocError::Config(format!(
            "{steps} sampling steps for a {total}-step schedule"
        )));
    }
    Ok((0..=steps)
        .rev()
        .map(|k| ((k * total) as f64 / steps as f64).round() as usize)
        .collect())
}

/// Deterministic (η = 0) DDIM update from `t` to `t_prev` in x0 form.
pub fn ddim_step(
    x_t: &Tensor,
    t: usize,
    t_prev: usize,
    x0_hat: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if t <= t_prev {
        return Err(LocError::Config(format!("DDIM step must go down, got {t} -> {t_prev}")));
    }
    let ab_t = sched.alpha_bar(t)?;
    let ab_prev = sched.alpha_bar(t_prev)?;
    if ab_t >= 1.0 {
        return Err(LocError::ScheduleDegenerate(t));
    }
    let eps = (x_t - x0_hat.affine(ab_t.sqrt(), 0.0)?)?.affine(1.0 / (1.0 - ab_t).sqrt(), 0.0)?;
    Ok((x0_hat.affine(ab_prev.sqrt(), 0.0)? + eps.affine((1.0 - ab_prev).sqrt(), 0.0)?)?)
}

/// Runs the full DDIM loop from seeded noise, conditioning on `cond`.
pub fn sample(
    predictor: &impl X0Predictor,
    cond: &Tensor,
    sched: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<Tensor> {
    let grid = ddim_timesteps(sched.steps(), steps)?;
    let mut rng = substream(seed, "ddim.init");
    let mut x = Tensor::from_vec(normal_vec(&mut rng, cond.elem_count()), cond.dims(), &Device::Cpu)?;
    for w in grid.windows(2) {
        let x0 = predictor.predict_x0(&x, w[0], cond)?;
        x = ddim_step(&x, w[0], w[1], &x0, sched)?;
    }
    Ok(x.clamp(-1f32, 1f32)?)
}

/// Edits every query with one bundle (or none). Queries are sampled as one batch
/// from a single noise draw, so outputs depend on batch composition.
pub fn edit_with_bundle(
    bundle: Option<&LoRABundle>,
    queries: &[&ImageTensor],
    model: &EditUnet,
    sched: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<Vec<ImageTensor>> {
    let cond = stack_images(queries, &Device::Cpu)?;
    let detached = bundle.map(LoRABundle::detach).transpose()?;
    let predictor = UnetPredictor {
        unet: model,
        bundle: detached.as_ref(),
    };
    unstack_images(&sample(&predictor, &cond, sched, steps, seed)?)
}

/// `B′ = 𝒢(ℋ(A, A′), B)`: one bundle from the pair, then DDIM on the query.
#[allow(clippy::too_many_arguments)]
pub fn edit(
    before: &ImageTensor,
    after: &ImageTensor,
    query: &ImageTensor,
    hypernet: &Hypernetwork,
    model: &EditUnet,
    sched: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<ImageTensor> {
    let dev = Device::Cpu;
    let bundle = hypernet
        .forward(&stack_images(&[before], &dev)?, &stack_images(&[after], &dev)?)?
        .detach()?;
    let mut out = edit_with_bundle(Some(&bundle), &[query], model, sched, steps, seed)?;
    Ok(out.remove(0))
}
