use serde::{Deserialize, Serialize};

use super::optim::AdamHyper;
use crate::error::{contract, Result};
use crate::model::ModelConfig;

/// Everything a training run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub optimizer: AdamHyper,
    /// Per-task loss weights; all 1.0 when absent.
    pub weights: Option<Vec<f64>>,
    pub blur_size: usize,
    pub blur_sigma: f64,
    /// Momentum of the decoder's running normalization statistics.
    pub norm_momentum: f64,
    /// Abort when a batch loss exceeds this or is not finite.
    pub divergence_limit: f64,
    /// Train single-task baselines and report `delta_m`.
    pub baselines: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 30,
            batch_size: 8,
            train_size: 64,
            val_size: 16,
            optimizer: AdamHyper::default(),
            weights: None,
            blur_size: 5,
            blur_sigma: 1.0,
            norm_momentum: 0.1,
            divergence_limit: 1e6,
            baselines: true,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.train_size == 0 || self.val_size == 0 {
            return Err(contract!("batch, train and validation sizes must be positive"));
        }
        if let Some(w) = &self.weights {
            if w.len() < self.model.num_tasks || w.iter().any(|&v| !(v > 0.0)) {
                return Err(contract!(
                    "need a positive weight for each of {} tasks, got {:?}",
                    self.model.num_tasks,
                    w
                ));
            }
        }
        if self.blur_size.is_multiple_of(2) || !(self.blur_sigma > 0.0) {
            return Err(contract!("blur task needs an odd size and positive sigma"));
        }
        if !(0.0..=1.0).contains(&self.norm_momentum) {
            return Err(contract!("norm_momentum must lie in [0, 1]"));
        }
        self.optimizer.validate()
    }

    /// Weight of each operator slot, defaulting to 1.
    pub fn task_weights(&self) -> Vec<f64> {
        let mut w = vec![1.0; super::suite::NUM_OPERATORS];
        if let Some(given) = &self.weights {
            for (slot, &v) in w.iter_mut().zip(given) {
                *slot = v;
            }
        }
        w
    }
}
