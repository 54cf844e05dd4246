#![allow(dead_code)]

use candle_core::{Device, Tensor};
use loc_core::config::RunConfig;
use loc_core::datamodel::ImageTensor;
use loc_core::diffusion::GeneratorConfig;
use loc_core::hypernetwork::HypernetConfig;
use loc_core::rng::{normal_vec, substream_indexed};

/// A 16-pixel model small enough for debug-speed tests.
pub fn tiny_config() -> RunConfig {
    let generator = GeneratorConfig {
        image_size: 16,
        patch_size: 4,
        base_dim: 16,
        mid_dim: 24,
        heads: 2,
        context_dim: 8,
        time_dim: 8,
    };
    let hypernet = HypernetConfig {
        image_size: 16,
        patch_size: 8,
        enc_dim: 16,
        enc_depth: 1,
        enc_heads: 2,
        fuse_dim: 16,
        num_queries: 6,
        dec_blocks: 1,
        dec_heads: 2,
        lora_rank: 2,
        host_layer_dims: generator.registry().iter().map(|l| l.dim).collect(),
        pretrained_encoder: None,
    };
    let mut cfg = RunConfig {
        generator,
        hypernet,
        ..RunConfig::default()
    };
    cfg.schedule.steps = 100;
    cfg.pretrain.steps = 4;
    cfg.pretrain.batch_size = 4;
    cfg.train.batch_size = 4;
    cfg.train.epochs = 1;
    cfg
}

pub fn random_image(size: usize, seed: u64, index: u64) -> ImageTensor {
    let mut rng = substream_indexed(seed, "test.image", index);
    let data = normal_vec(&mut rng, size * size * 3)
        .into_iter()
        .map(|v| (v * 0.5).clamp(-1.0, 1.0))
        .collect();
    ImageTensor::new(size, data).unwrap()
}

pub fn random_tensor(dims: &[usize], seed: u64) -> Tensor {
    let mut rng = substream_indexed(seed, "test.tensor", 0);
    let n = dims.iter().product();
    Tensor::from_vec(normal_vec(&mut rng, n), dims, &Device::Cpu).unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    (a - b)
        .unwrap()
        .abs()
        .unwrap()
        .flatten_all()
        .unwrap()
        .max(0)
        .unwrap()
        .to_scalar::<f32>()
        .unwrap()
}
