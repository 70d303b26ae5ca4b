use crate::error::{Error, Result};

use super::loss::LossConfig;
use super::optim::AdamConfig;

/// Optimization and loss settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Weight decay applied to the weights directly instead of via the gradient.
    pub decoupled_weight_decay: bool,
    pub tau_c: f64,
    pub tau_a: f64,
    pub tau_o: f64,
    pub batch: usize,
    pub epochs: usize,
    pub shift_ratio: f64,
    pub stage0_epochs: usize,
    pub stage0_lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            weight_decay: 5e-5,
            decoupled_weight_decay: true,
            tau_c: 0.01,
            tau_a: 0.0005,
            tau_o: 0.0005,
            batch: 32,
            epochs: 30,
            shift_ratio: 0.1,
            stage0_epochs: 20,
            stage0_lr: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, tau) in [("tau_c", self.tau_c), ("tau_a", self.tau_a), ("tau_o", self.tau_o)] {
            if !(tau > 0.0) || !tau.is_finite() {
                return Err(Error::Config(format!("{name} must be > 0, got {tau}")));
            }
        }
        if !(0.0..1.0).contains(&self.shift_ratio) {
            return Err(Error::Config(format!("shift_ratio must lie in [0, 1), got {}", self.shift_ratio)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        for (name, v) in [("lr", self.lr), ("stage0_lr", self.stage0_lr), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            tau_c: self.tau_c,
            tau_a: self.tau_a,
            tau_o: self.tau_o,
            primitive: true,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            decoupled: self.decoupled_weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn stage0_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.stage0_lr,
            ..self.adam()
        }
    }
}
