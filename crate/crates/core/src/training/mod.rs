//! Contrastive pretraining: InfoNCE over per-branch negative queues, the
//! intra- and inter-branch objectives, the training step and the epoch loop.

mod loss;
mod pretrain;
mod queue;
mod step;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TigrError};

pub use loss::{info_nce, inter_loss, inter_terms, intra_loss, intra_terms, mean_of, total_loss, Projections, Queues};
pub use pretrain::{pretrain, LossRow, PretrainOutput, LOSS_HEADER};
pub use queue::NegativeQueue;
pub use step::{prepare_step, step_loss, target_projections, train_step, LossParts, StepInputs, ViewRows};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub tau: f64,
    pub lambda: f64,
    pub queue: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch: 512,
            epochs: 10,
            tau: 0.05,
            lambda: 0.5,
            queue: 2048,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(TigrError::config("train.tau", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(TigrError::config("train.lambda", format!("{} outside [0, 1]", self.lambda)));
        }
        if self.batch < 2 {
            return Err(TigrError::config("train.batch", "must be at least 2"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TigrError::config("train.lr", "must be positive"));
        }
        Ok(())
    }
}

/// Losses of one step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossReport {
    pub intra: f64,
    pub inter: f64,
    pub total: f64,
    /// Intra-branch term per branch, keyed by branch code.
    pub per_branch: Vec<(String, f64)>,
}
