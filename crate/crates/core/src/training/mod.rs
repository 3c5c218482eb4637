//! Two-stage adaptation: spatial adapters on single frames with recaptioned
//! prompts, then temporal adapters, the motion enhancer and the appearance
//! injector on full clips with base prompts.

mod checkpoint;
mod optim;
mod pretrain;
mod stages;
mod steps;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use checkpoint::{
    MotionCheckpoint, SpatialCheckpoint, MOTION_CHECKPOINT_KIND, MOTION_CHECKPOINT_VERSION, SPATIAL_CHECKPOINT_KIND,
    SPATIAL_CHECKPOINT_VERSION,
};
pub use optim::ClippedAdamW;
pub use pretrain::{pretrain_backbone, PretrainConfig};
pub use stages::{
    initial_motion_state, initial_spatial, recaption_dataset, reference_residual, train_appearance,
    train_appearance_logged, train_motion, train_motion_logged, MotionInputs, MotionState,
};
pub use steps::{stage1_step, stage2_step, NoisePredictor, Stage1Batch, Stage2Batch, Stage2Loss, TrueNoiseOracle};

/// Stage hyperparameters. Read from a flat TOML file; absent keys take the
/// defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lora_rank: usize,
    /// `None` means `alpha = rank`.
    pub lora_alpha: Option<f64>,
    pub learning_rate: f64,
    pub max_steps: usize,
    pub lambda_reg: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub frames_per_sample: usize,
    pub null_prompt_probability: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lora_rank: 32,
            lora_alpha: None,
            learning_rate: 5e-4,
            max_steps: 600,
            lambda_reg: 1e-4,
            batch_size: 1,
            seed: 0,
            frames_per_sample: 8,
            null_prompt_probability: 0.1,
            weight_decay: 1e-2,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("TrainConfig serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.lambda_reg >= 0.0) {
            bad.push(format!("lambda_reg must be >= 0, got {}", self.lambda_reg));
        }
        if self.max_steps == 0 {
            bad.push("max_steps must be >= 1".to_string());
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be >= 1".to_string());
        }
        if self.lora_rank == 0 {
            bad.push("lora_rank must be >= 1".to_string());
        }
        if !(self.learning_rate > 0.0) {
            bad.push(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.null_prompt_probability) {
            bad.push(format!(
                "null_prompt_probability must be in [0, 1], got {}",
                self.null_prompt_probability
            ));
        }
        if self.frames_per_sample < 2 {
            bad.push("frames_per_sample must be >= 2".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn lora(&self) -> crate::adapters::LoraConfig {
        crate::adapters::LoraConfig {
            rank: self.lora_rank,
            alpha: self.lora_alpha,
            ..Default::default()
        }
    }
}

/// One training-log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub l_t: f64,
    pub l_reg: f64,
    pub e_r_norm: f64,
    pub grad_norm: f64,
    pub wallclock: f64,
}

/// In-memory training log, optionally mirrored to an append-only JSONL file.
#[derive(Debug, Default)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    path: Option<PathBuf>,
}

impl TrainLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn to_file(path: impl Into<PathBuf>) -> Self {
        Self {
            records: Vec::new(),
            path: Some(path.into()),
        }
    }

    pub fn push(&mut self, rec: LogRecord) -> Result<()> {
        if let Some(p) = &self.path {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            writeln!(f, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(p, e))?;
        }
        self.records.push(rec);
        Ok(())
    }
}
