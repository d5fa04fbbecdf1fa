use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning-rate, momentum and temperature schedules for pre-training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub momentum_start: f64,
    pub momentum_end: f64,
    pub tau_t_start: f64,
    pub tau_t_end: f64,
    pub tau_t_warmup_epochs: usize,
    pub tau_s: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            lr0: 2e-4,
            epochs: 400,
            warmup_epochs: 30,
            momentum_start: 0.996,
            momentum_end: 1.0,
            tau_t_start: 0.04,
            tau_t_end: 0.07,
            tau_t_warmup_epochs: 30,
            tau_s: 0.1,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.warmup_epochs > self.epochs {
            return bad(format!("warmup_epochs {} > epochs {}", self.warmup_epochs, self.epochs));
        }
        if !(self.momentum_start <= self.momentum_end && self.momentum_end <= 1.0 && self.momentum_start >= 0.0) {
            return bad(format!(
                "momentum schedule {} -> {} must satisfy 0 <= start <= end <= 1",
                self.momentum_start, self.momentum_end
            ));
        }
        if !(self.tau_s > 0.0 && self.tau_t_start > 0.0 && self.tau_t_end > 0.0) {
            return bad("temperatures must be positive".into());
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 {} must be finite and non-negative", self.lr0));
        }
        Ok(())
    }

    pub fn momentum(&self, step: u64, total_steps: u64) -> Result<f64> {
        momentum_schedule(step, total_steps, self.momentum_start, self.momentum_end)
    }

    pub fn tau_t(&self, epoch: usize) -> f64 {
        teacher_temp_schedule(epoch, self.tau_t_start, self.tau_t_end, self.tau_t_warmup_epochs)
    }
}

/// Cosine ramp of the EMA momentum from `start` at step 0 to `end` at `total_steps`.
pub fn momentum_schedule(step: u64, total_steps: u64, start: f64, end: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::InvalidArgument("momentum schedule needs total_steps > 0".into()));
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    Ok(end - (end - start) * (1.0 + (PI * t).cos()) / 2.0)
}

/// Linear warm-up of the teacher temperature, constant afterwards.
pub fn teacher_temp_schedule(epoch: usize, start: f64, end: f64, warmup_epochs: usize) -> f64 {
    if epoch >= warmup_epochs {
        end
    } else {
        start + (end - start) * epoch as f64 / warmup_epochs as f64
    }
}

/// Linear warm-up from 0 to `lr0`, then cosine decay to 0 at `total_steps`.
pub fn lr_schedule(step: u64, total_steps: u64, warmup_steps: u64, lr0: f64) -> f64 {
    if step < warmup_steps {
        return lr0 * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return lr0;
    }
    let t = (step.min(total_steps) - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    lr0 * 0.5 * (1.0 + (PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_endpoints_and_midpoint() {
        let c = ScheduleConfig::default();
        assert!((c.momentum(0, 1000).unwrap() - 0.996).abs() < 1e-12);
        assert!((c.momentum(1000, 1000).unwrap() - 1.0).abs() < 1e-12);
        assert!((c.momentum(500, 1000).unwrap() - 0.998).abs() < 1e-12);
        assert!(c.momentum(0, 0).is_err());
        let mut prev = 0.0;
        for s in 0..=100 {
            let m = c.momentum(s, 100).unwrap();
            assert!(m >= prev);
            prev = m;
        }
    }

    #[test]
    fn teacher_temperature() {
        let c = ScheduleConfig::default();
        assert!((c.tau_t(0) - 0.04).abs() < 1e-12);
        assert!((c.tau_t(15) - 0.055).abs() < 1e-12);
        assert!((c.tau_t(30) - 0.07).abs() < 1e-12);
        assert!((c.tau_t(399) - 0.07).abs() < 1e-12);
    }

    #[test]
    fn learning_rate() {
        assert_eq!(lr_schedule(0, 100, 10, 2e-4), 0.0);
        assert!((lr_schedule(10, 100, 10, 2e-4) - 2e-4).abs() < 1e-18);
        assert!((lr_schedule(55, 100, 10, 2e-4) - 1e-4).abs() < 1e-16);
        assert!(lr_schedule(100, 100, 10, 2e-4).abs() < 1e-18);
        assert!((lr_schedule(0, 100, 0, 1.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn validation() {
        assert!(ScheduleConfig::default().validate().is_ok());
        let c = ScheduleConfig {
            warmup_epochs: 500,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ScheduleConfig {
            momentum_start: 1.0,
            momentum_end: 0.99,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
