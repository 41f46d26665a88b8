//! Training configuration and the per-epoch learning-rate schedule:
//! linear warm-up, a constant plateau, then a half-cosine down to zero.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub cycle_start_epoch: usize,
    pub peak_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub crop_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            warmup_epochs: 10,
            cycle_start_epoch: 100,
            peak_lr: 7e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 8,
            crop_size: 672,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_epochs < self.cycle_start_epoch && self.cycle_start_epoch < self.epochs) {
            return Err(Error::Config(format!(
                "need warmup_epochs < cycle_start_epoch < epochs, got {} / {} / {}",
                self.warmup_epochs, self.cycle_start_epoch, self.epochs
            )));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config(format!("peak_lr {} must be positive", self.peak_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay {} must be ≥ 0", self.weight_decay)));
        }
        if self.batch_size == 0 || self.crop_size == 0 {
            return Err(Error::Config("batch_size and crop_size must be positive".into()));
        }
        Ok(())
    }
}

/// Learning rate for a (possibly fractional) epoch `t ∈ [0, epochs]`.
/// The warm-up ramp is `peak · (t + 1) / warmup_epochs`.
pub fn lr_curve(t: f64, cfg: &TrainConfig) -> f64 {
    let (warm, start, end) = (cfg.warmup_epochs as f64, cfg.cycle_start_epoch as f64, cfg.epochs as f64);
    if t < warm {
        cfg.peak_lr * (t + 1.0) / warm
    } else if t < start {
        cfg.peak_lr
    } else {
        0.5 * cfg.peak_lr * (1.0 + (PI * (t - start) / (end - start)).cos())
    }
}

/// Learning rate used throughout epoch `epoch`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Argument(format!("epoch {epoch} outside [0, {})", cfg.epochs)));
    }
    Ok(lr_curve(epoch as f64, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
        let bad = TrainConfig { cycle_start_epoch: 5, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn ramp_starts_small() {
        let cfg = TrainConfig::default();
        assert!((lr_at(0, &cfg).unwrap() - 7e-4).abs() < 1e-15);
        assert!(lr_at(150, &cfg).is_err());
    }
}
