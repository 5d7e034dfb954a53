//! Downstream task heads that sit on the pre-trained backbone, plus the
//! statistics used to evaluate them.

pub mod classify;
pub mod survival;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Shared fine-tuning settings. Survival fits run full-batch; the batch size
/// only applies to classifier mini-batching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Train only the task head, leaving every backbone weight untouched.
    pub freeze_backbone: bool,
    /// Independent restarts with shifted split seeds; results are averaged.
    pub repeats: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 7,
            freeze_backbone: false,
            repeats: 5,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(CoreError::Config("fine-tuning needs at least one epoch".into()));
        }
        if self.batch_size < 2 {
            return Err(CoreError::Config(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CoreError::Config(format!(
                "learning rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if self.repeats == 0 {
            return Err(CoreError::Config("repeats must be at least 1".into()));
        }
        Ok(())
    }
}
