//! Loss, optimizer, training loop with early stopping, and evaluation
//! metrics.

mod data;
mod loss;
mod metrics;
mod optim;
mod trainer;

pub use data::Dataset;
pub use loss::{auto_class_weights, weighted_bce, PROB_CLAMP};
pub use metrics::{
    aggregate, metrics, multi_seed_eval, roc_auc_rank, roc_auc_trapezoid, AggregateReport, Confusion, EvalReport,
    MetricSummary,
};
pub use optim::{AdamW, AdamWConfig};
pub use trainer::{evaluate, predict, train, EarlyStopping, EpochRecord, History, TrainOutcome};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassWeights {
    Auto,
    #[serde(untagged)]
    Fixed([f64; 2]),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    /// Batch size for validation and evaluation passes.
    pub eval_batch_size: usize,
    pub seed: u64,
    pub class_weights: ClassWeights,
    /// Stop as soon as validation accuracy reaches this value.
    pub target_val_acc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            weight_decay: 1e-4,
            max_epochs: 200,
            patience: 30,
            batch_size: 32,
            eval_batch_size: 32,
            seed: 0,
            class_weights: ClassWeights::Auto,
            target_val_acc: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr {} must be positive", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if self.max_epochs == 0 || self.patience == 0 || self.patience > self.max_epochs {
            return fail(format!(
                "need 0 < patience <= max_epochs (got patience {} and max_epochs {})",
                self.patience, self.max_epochs
            ));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return fail("batch sizes must be positive".into());
        }
        if let ClassWeights::Fixed(w) = self.class_weights {
            if !w.iter().all(|v| *v > 0.0 && v.is_finite()) {
                return fail(format!("class weights {w:?} must be positive"));
            }
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig::new(self.lr, self.weight_decay)
    }

    pub fn resolve_weights(&self, train_labels: &[u8]) -> Result<[f64; 2]> {
        match self.class_weights {
            ClassWeights::Auto => auto_class_weights(train_labels),
            ClassWeights::Fixed(w) => Ok(w),
        }
    }
}
