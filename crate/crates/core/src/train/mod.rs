//! Self-supervised pretraining, multi-label fine-tuning, EWC continual updates and inference.

mod ewc;
mod model;
mod ssl;
mod supervised;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{CycleSample, NormalizedCycle};

pub use ewc::{continual_update, ewc_penalty, ewc_total_loss, merge_fisher, TaskSnapshot};
pub use model::{Model, ModelConfig, CLASSIFIER_PREFIX};
pub use ssl::{mean_ssl_loss, predict_second_half, pretrain, ssl_loss, ssl_loss_from_prediction};
pub use model::Architecture;
pub use supervised::{bce_loss, fisher_diag, fit_params, mean_bce, predict, train_supervised, Prediction, BCE_EPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_ewc: f64,
    pub seed: u64,
    pub ssl_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            epochs: 12,
            batch_size: 16,
            lambda_ewc: 100.0,
            seed: 7,
            ssl_epochs: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be ≥ 1"));
        }
        if !(self.lambda_ewc >= 0.0 && self.lambda_ewc.is_finite()) {
            return Err(Error::invalid(format!("lambda_ewc must be ≥ 0, got {}", self.lambda_ewc)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
}

/// A normalized cycle with its on/off vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub cycle: NormalizedCycle,
    pub label: Vec<u8>,
}

impl Example {
    /// Labeled samples only; unlabeled ones are skipped.
    pub fn from_samples(samples: &[CycleSample]) -> Vec<Example> {
        samples
            .iter()
            .filter_map(|s| {
                s.label.as_ref().map(|l| Example {
                    cycle: s.cycle.clone(),
                    label: l.clone(),
                })
            })
            .collect()
    }

    pub fn target(&self) -> Vec<f64> {
        self.label.iter().map(|&b| f64::from(b)).collect()
    }
}
