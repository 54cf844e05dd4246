#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use loc_core::config::RunConfig;
use loc_core::diffusion::GeneratorConfig;
use loc_core::hypernetwork::HypernetConfig;

pub fn loc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_loc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawning loc")
}

pub fn loc_ok(args: &[&str]) -> Output {
    let out = loc(args);
    assert!(
        out.status.success(),
        "loc {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// 16-pixel run config that trains in seconds.
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
    cfg.train.stage2_epochs = 1;
    cfg
}

pub fn write_config(cfg: &RunConfig, path: &Path) {
    std::fs::write(path, serde_json::to_string_pretty(&cfg.to_json()).unwrap()).unwrap();
}

/// Generates a tiny pair corpus and trains a tiny run; returns the final checkpoint.
pub fn tiny_run(root: &Path, extra: &[&str]) -> std::path::PathBuf {
    let data = root.join("pairs");
    if !data.exists() {
        loc_ok(&["gen-data", "--out", p(&data), "--n-pairs", "8", "--seed", "1", "--image-size", "16"]);
    }
    let cfg = root.join("tiny.json");
    write_config(&tiny_config(), &cfg);
    let out = root.join("run");
    let mut args = vec!["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&out)];
    args.extend_from_slice(extra);
    loc_ok(&args);
    out.join("final")
}
