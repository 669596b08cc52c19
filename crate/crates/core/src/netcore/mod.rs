//! Minimal feed-forward feature extractor with hand-written backpropagation,
//! the fixed-prototype CoReS loss and momentum SGD.

mod loss;
mod model;
mod sgd;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use loss::{cores_loss_and_grad, softmax_cross_entropy, LinearHead};
pub use model::{init_model, DenseLayer, FeatureModel, ForwardCache, Gradients};
pub use sgd::{sgd_step, sgd_update, SgdHyper, Velocity};
pub use train::{
    evaluate_loss, train_epochs, train_with, EpochEnd, FixedPrototypes, Objective, ObjectiveStep,
    SoftmaxHead, TrainData, TrainOutcome,
};

/// How a model's parameters are initialized at an upgrade step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitMode {
    /// The same random parameters at every upgrade.
    SameSeed,
    /// New random parameters at every upgrade.
    FreshRandom,
    /// Continue from the previous upgrade's parameters.
    FineTune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// `(epoch, rate)`: from that (0-based) epoch on, train with `rate`.
    pub lr_schedule: Vec<(usize, f64)>,
    pub init_mode: InitMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            epochs: 100,
            lr_schedule: vec![(70, 0.01)],
            init_mode: InitMode::SameSeed,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.lr_schedule.iter().any(|&(_, r)| !(r > 0.0 && r.is_finite())) {
            return Err(Error::invalid("scheduled learning rates must be positive"));
        }
        Ok(())
    }

    pub fn rate_at(&self, epoch: usize) -> f64 {
        let mut rate = self.learning_rate;
        let mut latest = None;
        for &(e, r) in &self.lr_schedule {
            if e <= epoch && latest.is_none_or(|l| e >= l) {
                rate = r;
                latest = Some(e);
            }
        }
        rate
    }

    pub fn hyper_at(&self, epoch: usize) -> SgdHyper {
        SgdHyper {
            learning_rate: self.rate_at(epoch),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_applies_from_stated_epoch() {
        let cfg = TrainConfig {
            lr_schedule: vec![(140, 0.01), (70, 0.1)],
            learning_rate: 0.5,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.rate_at(0), 0.5);
        assert_eq!(cfg.rate_at(69), 0.5);
        assert_eq!(cfg.rate_at(70), 0.1);
        assert_eq!(cfg.rate_at(139), 0.1);
        assert_eq!(cfg.rate_at(200), 0.01);
    }

    #[test]
    fn validation_rejects_zero_epochs_and_batch() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
        cfg.epochs = 1;
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        cfg.batch_size = 1;
        cfg.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
    }
}
