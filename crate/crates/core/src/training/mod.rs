//! LoC training: paired-quad construction, the dual reconstruction objective,
//! and the staged trainer that updates only the hypernetwork.

mod loss;
mod optim;
mod pretrain;

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use loss::{
    dual_terms, exchange_pair, loc_loss, make_paired_quad, Generator, LossDraws, LossReport,
    QuadBatch,
};
pub use optim::{AdamW, AdamWConfig};
pub use pretrain::{pretrain_generator, PretrainConfig};

use crate::datamodel::{save_checkpoint, Manifest, NamedTensor};
use crate::diffusion::{EditUnet, NoiseSchedule};
use crate::error::{LocError, Result};
use crate::hypernetwork::Hypernetwork;
use crate::rng::substream_indexed;
use crate::synthdata::PairRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Epochs of the first stage.
    pub epochs: usize,
    /// Optional cap on first-stage steps.
    #[serde(default)]
    pub max_steps: Option<u64>,
    pub stage2_epochs: usize,
    #[serde(default)]
    pub stage2_max_steps: Option<u64>,
    /// Learning rate of the fine-tuning stage.
    #[serde(default = "default_stage2_lr")]
    pub stage2_lr: f64,
    pub exchange_prob: f64,
    pub reverse_enabled: bool,
    pub exchange_enabled: bool,
    /// Checkpoint every this many steps; 0 keeps only stage-end checkpoints.
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.01,
            batch_size: 8,
            epochs: 10,
            max_steps: None,
            stage2_epochs: 2,
            stage2_max_steps: None,
            stage2_lr: default_stage2_lr(),
            exchange_prob: 0.5,
            reverse_enabled: true,
            exchange_enabled: true,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

fn default_stage2_lr() -> f64 {
    1e-4
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.stage2_lr > 0.0) {
            return Err(LocError::Config(format!(
                "learning rates must be > 0, got {} and {}",
                self.lr, self.stage2_lr
            )));
        }
        if !(0.0..=1.0).contains(&self.exchange_prob) {
            return Err(LocError::Config(format!(
                "exchange_prob must be in [0, 1], got {}",
                self.exchange_prob
            )));
        }
        if self.batch_size == 0 {
            return Err(LocError::Config("batch_size must be > 0".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(LocError::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::with_lr(self.lr)
        }
    }
}

/// Which stage a run is in and how far it got.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub stage: String,
    pub stage_step: u64,
    pub global_step: u64,
    pub completed: Vec<StageSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub name: String,
    pub samples: usize,
    pub steps: u64,
}

/// Everything the trainer mutates.
pub struct TrainState {
    pub optimizer: AdamW,
    pub progress: Progress,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            optimizer: AdamW::new(cfg.optimizer()),
            progress: Progress::default(),
        }
    }
}

/// Where a run writes its metrics log and checkpoints.
pub struct RunOutput {
    pub dir: PathBuf,
    /// Full configuration echoed into every checkpoint manifest.
    pub config: serde_json::Value,
    pub seed: u64,
}

impl RunOutput {
    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }

    /// Drops log lines past `global_step`, left by an earlier run in the same
    /// directory or by steps after the checkpoint being resumed.
    fn trim_metrics(&self, global_step: u64) -> Result<()> {
        let path = self.metrics_path();
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
            Err(e) => return Err(LocError::io(&path, e)),
        };
        let mut kept = String::new();
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line)?;
            if v["step"].as_u64().is_some_and(|s| s <= global_step) {
                kept.push_str(line);
                kept.push('\n');
            }
        }
        if kept.len() != text.len() {
            std::fs::write(&path, kept).map_err(|e| LocError::io(&path, e))?;
        }
        Ok(())
    }

    fn append_metrics(&self, stage: &str, r: &LossReport, wall_time: f64) -> Result<()> {
        let path = self.metrics_path();
        let line = serde_json::json!({
            "stage": stage,
            "step": r.step,
            "forward_term": r.forward_term,
            "reverse_term": r.reverse_term,
            "total": r.total,
            "wall_time": wall_time,
        });
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| LocError::io(&path, e))?;
        writeln!(f, "{line}").map_err(|e| LocError::io(&path, e))
    }
}

/// Writes generator, hypernetwork and optimizer state with the run progress.
pub fn save_run_checkpoint(
    dir: &Path,
    out: &RunOutput,
    model: &EditUnet,
    hypernet: &Hypernetwork,
    state: &TrainState,
    cfg: &TrainConfig,
) -> Result<()> {
    let mut tensors: Vec<NamedTensor> = model.store().to_named()?;
    tensors.extend(hypernet.store().to_named()?);
    tensors.extend(state.optimizer.to_named()?);
    let mut manifest = Manifest::new(out.config.clone(), state.progress.global_step, out.seed);
    manifest.extras = serde_json::json!({
        "progress": state.progress,
        "reverse_enabled": cfg.reverse_enabled,
        "exchange_enabled": cfg.exchange_enabled,
        "host_layers": model.registry(),
    });
    save_checkpoint(&tensors, &manifest, dir)
}

/// One stage of the schedule.
#[derive(Clone, Debug)]
pub struct StagePlan {
    pub name: String,
    pub epochs: usize,
    pub max_steps: Option<u64>,
    pub lr: f64,
}

impl StagePlan {
    pub fn total_steps(&self, samples: usize, batch: usize) -> u64 {
        let per_epoch = (samples / batch.min(samples).max(1)).max(1) as u64;
        let steps = per_epoch * self.epochs as u64;
        self.max_steps.map_or(steps, |m| m.min(steps))
    }
}

/// Runs (or continues) one stage. Per-step randomness is drawn from streams
/// indexed by the stage step, so a resumed stage replays exactly.
#[allow(clippy::too_many_arguments)]
pub fn train_stage(
    records: &[PairRecord],
    hypernet: &Hypernetwork,
    model: &EditUnet,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    plan: &StagePlan,
    state: &mut TrainState,
    out: Option<&RunOutput>,
) -> Result<Vec<LossReport>> {
    cfg.validate()?;
    if !model.is_frozen() {
        return Err(LocError::Config("LoC training needs a frozen generator".into()));
    }
    if records.is_empty() {
        return Err(LocError::Dataset(format!("stage `{}` has no training pairs", plan.name)));
    }
    let batch = cfg.batch_size.min(records.len());
    let per_epoch = (records.len() / batch) as u64;
    let total = plan.total_steps(records.len(), cfg.batch_size);
    if state.progress.stage != plan.name {
        state.progress.stage = plan.name.clone();
        state.progress.stage_step = 0;
    }
    state.optimizer.set_lr(plan.lr);
    if let Some(out) = out {
        out.trim_metrics(state.progress.global_step)?;
    }
    let start = Instant::now();
    let mut reports = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    let mut order_epoch = u64::MAX;
    while state.progress.stage_step < total {
        let k = state.progress.stage_step;
        let epoch = k / per_epoch;
        if epoch != order_epoch {
            order = (0..records.len()).collect();
            order.shuffle(&mut substream_indexed(cfg.seed, &format!("train.{}.shuffle", plan.name), epoch));
            order_epoch = epoch;
        }
        let offset = ((k % per_epoch) as usize) * batch;
        let mut flip_rng = substream_indexed(cfg.seed, &format!("train.{}.flip", plan.name), k);
        let mut swap_rng = substream_indexed(cfg.seed, &format!("train.{}.exchange", plan.name), k);
        let mut noise_rng = substream_indexed(cfg.seed, &format!("train.{}.noise", plan.name), k);
        let samples = order[offset..offset + batch]
            .iter()
            .map(|&i| {
                let r = &records[i];
                let s = make_paired_quad(&r.before, &r.after, &mut flip_rng)?;
                if cfg.exchange_enabled {
                    exchange_pair(s, &mut swap_rng, cfg.exchange_prob)
                } else {
                    Ok(s)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let qb = QuadBatch::from_samples(&samples)?;
        let draws = LossDraws::sample(&mut noise_rng, qb.before.dims(), sched.steps())?;
        let step = state.progress.global_step + 1;
        let (loss, report) = loc_loss(&qb, hypernet, model, sched, &draws, cfg.reverse_enabled, step)?;
        let grads = loss.backward()?;
        state.optimizer.step(hypernet.store(), &grads, step)?;
        state.progress.stage_step += 1;
        state.progress.global_step = step;
        if let Some(out) = out {
            out.append_metrics(&plan.name, &report, start.elapsed().as_secs_f64())?;
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                let dir = out.dir.join("checkpoints").join(format!("step_{step:07}"));
                save_run_checkpoint(&dir, out, model, hypernet, state, cfg)?;
            }
        }
        if step % 50 == 0 {
            log::info!(
                "{} step {step}: total {:.5} (fwd {:.5}, rev {:.5})",
                plan.name,
                report.total,
                report.forward_term,
                report.reverse_term
            );
        }
        reports.push(report);
    }
    if !state.progress.completed.iter().any(|s| s.name == plan.name) {
        state.progress.completed.push(StageSummary {
            name: plan.name.clone(),
            samples: records.len(),
            steps: total,
        });
    }
    if let Some(out) = out {
        save_run_checkpoint(&out.dir.join(&plan.name), out, model, hypernet, state, cfg)?;
    }
    Ok(reports)
}

pub const STAGE1: &str = "stage1";
pub const STAGE2: &str = "stage2";

/// Stage 1 on the full corpus, then stage 2 on the curated one. A state that
/// already finished stage 1 (a resumed run) goes straight to stage 2.
#[allow(clippy::too_many_arguments)]
pub fn two_stage_train(
    stage1: &[PairRecord],
    stage2: Option<&[PairRecord]>,
    hypernet: &Hypernetwork,
    model: &EditUnet,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    state: &mut TrainState,
    out: Option<&RunOutput>,
) -> Result<Vec<LossReport>> {
    let mut reports = Vec::new();
    let s1_done = state.progress.completed.iter().any(|s| s.name == STAGE1);
    if !s1_done {
        let plan = StagePlan {
            name: STAGE1.into(),
            epochs: cfg.epochs,
            max_steps: cfg.max_steps,
            lr: cfg.lr,
        };
        reports.extend(train_stage(stage1, hypernet, model, sched, cfg, &plan, state, out)?);
    }
    if let Some(s2) = stage2 {
        let plan = StagePlan {
            name: STAGE2.into(),
            epochs: cfg.stage2_epochs,
            max_steps: cfg.stage2_max_steps,
            lr: cfg.stage2_lr,
        };
        reports.extend(train_stage(s2, hypernet, model, sched, cfg, &plan, state, out)?);
    }
    if let Some(out) = out {
        save_run_checkpoint(&out.dir.join("final"), out, model, hypernet, state, cfg)?;
    }
    Ok(reports)
}

/// Exponential moving average with weight `alpha` on the newest value.
pub fn ema(values: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = None;
    for &v in values {
        let next = match acc {
            None => v,
            Some(a) => alpha * v + (1.0 - alpha) * a,
        };
        acc = Some(next);
        out.push(next);
    }
    out
}
