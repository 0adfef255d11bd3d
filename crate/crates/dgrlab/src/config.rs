//! TOML run configuration.
//!
//! ```toml
//! seed = 0
//! types = ["blur", "additive-noise", "pixelate"]
//!
//! [model]
//! feature_dim = 64
//!
//! [train]
//! pretrain_steps = 2000
//!
//! [eval]
//! heldout_samples = 200
//! ```
//!
//! Every key except `types` has a default, and a file with no keys at all
//! runs the default pipeline over all seven distortion families. Any other
//! file must list `types`. Unknown keys are rejected by name.

use std::path::{Path, PathBuf};

use dgrlab_core::eval::EvalConfig;
use dgrlab_core::model::ModelConfig;
use dgrlab_core::synth::Family;
use dgrlab_core::train::{Schedule, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// The `[train]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub patch_size: usize,
    pub graph_size: usize,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub pretrain_lr: f64,
    pub finetune_lr: f64,
    pub lambda: f64,
    pub margin: f64,
    pub eval_every: usize,
    pub finetune_schedule: Schedule,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            patch_size: t.patch_size,
            graph_size: t.graph_size,
            pretrain_steps: t.pretrain_steps,
            finetune_steps: t.finetune_steps,
            pretrain_lr: t.pretrain_lr,
            finetune_lr: t.finetune_lr,
            lambda: t.lambda,
            margin: t.margin,
            eval_every: t.eval_every,
            finetune_schedule: t.finetune_schedule,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    seed: u64,
    types: Vec<Family>,
    #[serde(default)]
    model: ModelConfig,
    #[serde(default)]
    train: TrainSection,
    #[serde(default)]
    eval: EvalConfig,
}

/// A validated run configuration.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.message().to_string()))?;
        if table.is_empty() {
            return Ok(Self::default());
        }
        let file: FileConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.message().to_string()))?;
        let t = file.train;
        let cfg = Self {
            model: file.model,
            train: TrainConfig {
                seed: file.seed,
                types: file.types,
                patch_size: t.patch_size,
                graph_size: t.graph_size,
                pretrain_steps: t.pretrain_steps,
                finetune_steps: t.finetune_steps,
                pretrain_lr: t.pretrain_lr,
                finetune_lr: t.finetune_lr,
                lambda: t.lambda,
                margin: t.margin,
                eval_every: t.eval_every,
                finetune_schedule: t.finetune_schedule,
            },
            eval: file.eval,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let mut seen = self.train.types.clone();
        seen.sort_by_key(|f| f.name());
        seen.dedup();
        if seen.len() != self.train.types.len() {
            return Err(ConfigError::Invalid("types lists a family twice".into()));
        }
        let min = 1usize << self.model.conv_channels.len();
        if self.train.patch_size < min.max(8) {
            return Err(ConfigError::Invalid(format!(
                "patch_size {} is below the minimum {}",
                self.train.patch_size,
                min.max(8)
            )));
        }
        if self.eval.image_size < self.train.patch_size {
            return Err(ConfigError::Invalid("eval.image_size must be at least train.patch_size".into()));
        }
        Ok(())
    }

    /// Reads and parses `path`, returning the raw bytes alongside so the
    /// caller can hash exactly what was read.
    pub fn load(path: &Path) -> Result<(Self, Vec<u8>), ConfigError> {
        let bytes = std::fs::read(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let text = std::str::from_utf8(&bytes).map_err(|_| ConfigError::Parse("config is not UTF-8".into()))?;
        Ok((Self::parse(text)?, bytes))
    }

    /// Overrides the training seed; evaluation keeps its own.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self
    }
}
