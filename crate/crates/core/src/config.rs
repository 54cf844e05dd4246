//! The run configuration document and loading of run checkpoints.

use std::path::{Path, PathBuf};

use candle_core::Device;
use serde::{Deserialize, Serialize};

use crate::datamodel::{load_checkpoint, Manifest, NamedTensor};
use crate::diffusion::{self, EditUnet, GeneratorConfig, NoiseSchedule, ScheduleConfig};
use crate::error::{LocError, Result};
use crate::hypernetwork::{self, HypernetConfig, Hypernetwork};
use crate::nn::ParamStore;
use crate::training::{AdamW, PretrainConfig, Progress, TrainConfig, TrainState};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub stage1: Option<PathBuf>,
    #[serde(default)]
    pub stage2: Option<PathBuf>,
    #[serde(default)]
    pub eval_quads: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub hypernet: HypernetConfig,
    pub schedule: ScheduleConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let generator = GeneratorConfig::default();
        let hypernet = HypernetConfig {
            image_size: generator.image_size,
            patch_size: 16,
            enc_dim: 96,
            enc_depth: 2,
            enc_heads: 4,
            fuse_dim: 96,
            num_queries: 6,
            dec_blocks: 2,
            dec_heads: 4,
            lora_rank: 4,
            host_layer_dims: generator.registry().iter().map(|l| l.dim).collect(),
            pretrained_encoder: None,
        };
        Self {
            generator,
            hypernet,
            schedule: ScheduleConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.hypernet.validate()?;
        self.pretrain.validate()?;
        self.train.validate()?;
        let host: Vec<usize> = self.generator.registry().iter().map(|l| l.dim).collect();
        if self.hypernet.host_layer_dims != host {
            return Err(LocError::Config(format!(
                "hypernet.host_layer_dims {:?} must equal the generator registry {host:?}",
                self.hypernet.host_layer_dims
            )));
        }
        if self.hypernet.image_size != self.generator.image_size {
            return Err(LocError::Config("hypernet and generator image sizes differ".into()));
        }
        if self.schedule.steps < 1 {
            return Err(LocError::Config("schedule.steps must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(LocError::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| LocError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::from_config(&self.schedule)
    }
}

/// A run checkpoint rebuilt into models.
pub struct RunCheckpoint {
    pub config: RunConfig,
    pub manifest: Manifest,
    /// Frozen generator.
    pub model: EditUnet,
    pub hypernet: Hypernetwork,
    pub state: TrainState,
}

fn with_prefix(tensors: &[NamedTensor], prefix: &str) -> Vec<NamedTensor> {
    let p = format!("{prefix}.");
    tensors.iter().filter(|t| t.name.starts_with(&p)).cloned().collect()
}

/// Loads only the generator tensors of a checkpoint, frozen.
pub fn load_generator(dir: &Path, cfg: &GeneratorConfig) -> Result<EditUnet> {
    let (tensors, _) = load_checkpoint(dir)?;
    let store = ParamStore::from_named(&with_prefix(&tensors, diffusion::PREFIX), &Device::Cpu)?;
    EditUnet::from_store(cfg, store, true)
}

pub fn load_run_checkpoint(dir: &Path) -> Result<RunCheckpoint> {
    let (tensors, manifest) = load_checkpoint(dir)?;
    let config: RunConfig = serde_json::from_value(manifest.config.clone())?;
    config.validate()?;
    let dev = Device::Cpu;
    let unet = ParamStore::from_named(&with_prefix(&tensors, diffusion::PREFIX), &dev)?;
    let hyper = ParamStore::from_named(&with_prefix(&tensors, hypernetwork::PREFIX), &dev)?;
    let model = EditUnet::from_store(&config.generator, unet, true)?;
    let hypernet = Hypernetwork::from_store(&config.hypernet, hyper)?;
    let progress: Progress = match manifest.extras.get("progress") {
        Some(p) => serde_json::from_value(p.clone())?,
        None => Progress::default(),
    };
    let state = TrainState {
        optimizer: AdamW::from_named(config.train.optimizer(), &tensors)?,
        progress,
    };
    Ok(RunCheckpoint {
        config,
        manifest,
        model,
        hypernet,
        state,
    })
}
