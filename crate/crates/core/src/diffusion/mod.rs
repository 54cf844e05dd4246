//! Noise schedule, the conditional x0-prediction generator and DDIM editing.

mod sampler;
mod schedule;
mod unet;

pub use sampler::{ddim_step, ddim_timesteps, edit, edit_with_bundle, sample, UnetPredictor, X0Predictor};
pub use schedule::{add_noise, add_noise_batch, NoiseSchedule, ScheduleConfig, ScheduleKind};
pub use unet::{Conditioning, EditUnet, GeneratorConfig, HostLayer, DESCRIPTOR_DIM, PREFIX};
