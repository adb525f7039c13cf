use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optimizer and schedule hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSchedule {
    pub lr_initial: f64,
    pub max_iteration: usize,
    pub power: f64,
    /// Weight of the auxiliary loss.
    pub aux_weight: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        Self {
            lr_initial: 4.5e-2,
            max_iteration: 500,
            power: 0.9,
            aux_weight: 0.3,
            weight_decay: 1e-4,
            momentum: 0.9,
            batch_size: 8,
        }
    }
}

impl TrainingSchedule {
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            v.push(format!(
                "lr_initial must be positive, got {}",
                self.lr_initial
            ));
        }
        if self.max_iteration < 1 {
            v.push("max_iteration must be >= 1".to_string());
        }
        if !(self.power > 0.0) {
            v.push(format!("power must be positive, got {}", self.power));
        }
        if !(self.aux_weight >= 0.0) {
            v.push(format!("aux_weight must be >= 0, got {}", self.aux_weight));
        }
        if !(self.weight_decay >= 0.0) {
            v.push(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            v.push(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.batch_size < 1 {
            v.push("batch_size must be >= 1".to_string());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(v))
        }
    }

    /// `lr_initial · (1 − iteration / max_iteration)^power`; zero (with a
    /// warning) past the end.
    pub fn poly_lr(&self, iteration: usize) -> f64 {
        if iteration > self.max_iteration {
            log::warn!(
                "iteration {iteration} beyond max_iteration {}; learning rate clamped to 0",
                self.max_iteration
            );
            return 0.0;
        }
        let frac = 1.0 - iteration as f64 / self.max_iteration as f64;
        self.lr_initial * frac.powf(self.power)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_values() {
        let s = TrainingSchedule::default();
        assert_eq!(s.poly_lr(0), 4.5e-2);
        assert_eq!(s.poly_lr(500), 0.0);
        assert_eq!(s.poly_lr(501), 0.0);
        let s = TrainingSchedule {
            lr_initial: 0.01,
            max_iteration: 1000,
            ..Default::default()
        };
        assert!((s.poly_lr(500) - 5.3589e-3).abs() < 1e-7);
    }
}
