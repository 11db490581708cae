//! Self-supervised pre-training: alteration, L1 reconstruction, Adam with a
//! warm-up/decay schedule, checkpointing and resumption.

mod adam;
mod checkpoint;
mod evaluate;
mod loss;
mod schedule;
mod train;

pub use adam::{clip_global_norm, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, LossPoint, TCKP_MAGIC, TCKP_VERSION};
pub use evaluate::{channel_means, masked_reconstruction_eval, ReconstructionEval};
pub use loss::{l1_loss, loss_mask, L1Accumulator, LossScope};
pub use schedule::lr_at_step;
pub use train::{batch_indices, pad_batch, pretrain, pretrain_run, train_step, PaddedBatch, StepReport, TrainState};

use serde::{Deserialize, Serialize};

use crate::alteration::AlterationConfig;
use crate::encoder::ModelConfig;
use crate::error::{Result, TeraError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: u64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "defaults::warmup_fraction")]
    pub warmup_fraction: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Global gradient-norm ceiling; 0 disables clipping.
    #[serde(default = "defaults::grad_clip")]
    pub grad_clip: f64,
    #[serde(default)]
    pub alteration: AlterationConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub loss_scope: LossScope,
    /// Write a checkpoint every this many steps (final checkpoint always written).
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
}

mod defaults {
    pub fn batch_size() -> usize {
        12
    }
    pub fn peak_lr() -> f64 {
        2e-4
    }
    pub fn warmup_fraction() -> f64 {
        0.07
    }
    pub fn grad_clip() -> f64 {
        1.0
    }
}

impl TrainConfig {
    pub fn new(model: ModelConfig, total_steps: u64) -> Self {
        TrainConfig {
            total_steps,
            batch_size: defaults::batch_size(),
            peak_lr: defaults::peak_lr(),
            warmup_fraction: defaults::warmup_fraction(),
            adam: AdamConfig::default(),
            grad_clip: defaults::grad_clip(),
            alteration: AlterationConfig::default(),
            model,
            seed: 0,
            loss_scope: LossScope::FullSequence,
            checkpoint_every: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(TeraError::Config(m.into()));
        if self.total_steps < 1 {
            return err("total_steps must be at least 1");
        }
        if self.batch_size < 1 {
            return err("batch_size must be at least 1");
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return err("warmup_fraction must lie in (0, 1)");
        }
        if !(self.peak_lr > 0.0) {
            return err("peak_lr must be positive");
        }
        if self.checkpoint_every == Some(0) {
            return err("checkpoint_every must be positive");
        }
        self.alteration.validate()?;
        self.model.validate()
    }

    pub fn from_json(text: &str, source: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| TeraError::parse(source, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
