use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning-rate schedule and optimizer hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub base_lr: f64,
    /// Epochs at which the rate is multiplied by `gamma`; strictly increasing.
    #[serde(default)]
    pub milestones: Vec<usize>,
    pub gamma: f64,
    /// Leading epochs over which the rate ramps up linearly, per step.
    #[serde(default)]
    pub warmup_epochs: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_epochs: usize,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    5e-4
}

impl TrainSchedule {
    /// 200 epochs, decay by 0.2 at 60/120/160, one warmup epoch, batch 128.
    pub fn cifar() -> Self {
        Self {
            base_lr: 0.1,
            milestones: vec![60, 120, 160],
            gamma: 0.2,
            warmup_epochs: 1,
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            batch_size: 128,
            total_epochs: 200,
        }
    }

    /// Decay by `gamma` every `every` epochs.
    pub fn step_decay(base_lr: f64, every: usize, gamma: f64, total_epochs: usize, batch_size: usize) -> Self {
        let milestones = if every == 0 {
            Vec::new()
        } else {
            (1..).map(|k| k * every).take_while(|&e| e < total_epochs).collect()
        };
        Self {
            base_lr,
            milestones,
            gamma,
            warmup_epochs: 0,
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            batch_size,
            total_epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "milestones must be strictly increasing, got {:?}",
                self.milestones
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if self.batch_size == 0 || self.total_epochs == 0 {
            return Err(Error::config("batch_size and total_epochs must be positive"));
        }
        Ok(())
    }

    /// Rate for one optimizer step.
    pub fn lr_at(&self, epoch: usize, step_in_epoch: usize, steps_per_epoch: usize) -> f64 {
        let decays = self.milestones.iter().filter(|&&m| m <= epoch).count();
        let lr = self.base_lr * self.gamma.powi(decays as i32);
        if epoch < self.warmup_epochs && steps_per_epoch > 0 {
            let total = (self.warmup_epochs * steps_per_epoch) as f64;
            let k = (epoch * steps_per_epoch + step_in_epoch.min(steps_per_epoch - 1)) as f64;
            lr * (k + 1.0) / total
        } else {
            lr
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cifar_milestones() {
        let s = TrainSchedule::cifar();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-15;
        assert!(close(s.lr_at(59, 0, 391), 0.1));
        assert!(close(s.lr_at(60, 0, 391), 0.02));
        assert!(close(s.lr_at(125, 0, 391), 0.004));
        assert!(close(s.lr_at(161, 0, 391), 0.0008));
    }

    #[test]
    fn detection_decay() {
        let s = TrainSchedule::step_decay(0.01, 5, 0.1, 30, 2);
        assert_eq!(s.milestones, vec![5, 10, 15, 20, 25]);
        assert!((s.lr_at(4, 0, 10) - 0.01).abs() < 1e-15);
        assert!((s.lr_at(5, 0, 10) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn warmup_ramps_to_base() {
        let s = TrainSchedule::cifar();
        let lrs: Vec<f64> = (0..10).map(|k| s.lr_at(0, k, 10)).collect();
        assert!((lrs[0] - 0.01).abs() < 1e-15);
        assert!((lrs[9] - 0.1).abs() < 1e-15);
        assert!(lrs[4] > 0.0 && lrs[4] < 0.1);
        assert!(lrs.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(s.lr_at(1, 0, 10), 0.1);
    }

    #[test]
    fn invalid_schedules() {
        let mut s = TrainSchedule::cifar();
        s.milestones = vec![60, 60];
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        let mut s = TrainSchedule::cifar();
        s.gamma = 1.0;
        assert!(s.validate().is_err());
        assert!(TrainSchedule::cifar().validate().is_ok());
    }
}
