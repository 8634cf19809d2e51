//! Per-epoch schedules for the self-paced threshold and the learning rate.
//! Epochs are 1-based.

use crate::error::{Error, Result};

/// `lambda(e) = a * log10(e) + b`, pinned to `lambda_ini` at epoch 1 and
/// `lambda_lst` at the last epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaSchedule {
    pub lambda_ini: f64,
    pub lambda_lst: f64,
    pub total_epochs: usize,
    pub a: f64,
    pub b: f64,
}

impl LambdaSchedule {
    pub fn new(lambda_ini: f64, lambda_lst: f64, total_epochs: usize) -> Result<Self> {
        if total_epochs < 2 {
            return Err(Error::config(format!(
                "lambda schedule needs at least 2 epochs, got {total_epochs}"
            )));
        }
        if !lambda_ini.is_finite() || !lambda_lst.is_finite() {
            return Err(Error::config("lambda endpoints must be finite"));
        }
        Ok(LambdaSchedule {
            lambda_ini,
            lambda_lst,
            total_epochs,
            a: (lambda_lst - lambda_ini) / (total_epochs as f64).log10(),
            b: lambda_ini,
        })
    }

    pub fn at(&self, epoch: usize) -> f64 {
        if epoch <= 1 {
            return self.lambda_ini;
        }
        if epoch >= self.total_epochs {
            return self.lambda_lst;
        }
        self.a * (epoch as f64).log10() + self.b
    }
}

pub fn lambda_at_epoch(sched: &LambdaSchedule, epoch: usize) -> f64 {
    sched.at(epoch)
}

/// Step decay: `initial * factor^floor((e - 1) / period)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub factor: f64,
    pub period: usize,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            initial: 0.1,
            factor: 0.1,
            period: 50,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0) {
            return Err(Error::config(format!(
                "learning rate {} must be positive",
                self.initial
            )));
        }
        if !(self.factor > 0.0 && self.factor <= 1.0) {
            return Err(Error::config(format!("lr decay {} must lie in (0, 1]", self.factor)));
        }
        if self.period == 0 {
            return Err(Error::config("lr period must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight decay must be non-negative"));
        }
        Ok(())
    }

    pub fn at(&self, epoch: usize) -> f64 {
        let drops = epoch.saturating_sub(1) / self.period;
        self.initial * self.factor.powi(drops as i32)
    }
}

pub fn lr_at_epoch(sched: &LrSchedule, epoch: usize) -> f64 {
    sched.at(epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn lambda_examples() {
        let s = LambdaSchedule::new(10f64.ln(), 1.0, 100).unwrap();
        assert_eq!(s.at(1), 10f64.ln());
        assert_eq!(s.at(100), 1.0);
        assert_abs_diff_eq!(s.at(10), 1.651293, epsilon = 1e-6);
        assert_abs_diff_eq!(s.at(10), 10f64.ln() + (1.0 - 10f64.ln()) / 2.0, epsilon = 1e-12);
        assert!(LambdaSchedule::new(1.0, 0.5, 1).is_err());
    }

    #[test]
    fn formula_matches_endpoints_without_clamping() {
        let s = LambdaSchedule::new(2.0, 0.3, 37).unwrap();
        assert_abs_diff_eq!(s.a * 37f64.log10() + s.b, 0.3, epsilon = 1e-14);
        assert_eq!(s.a * 1f64.log10() + s.b, 2.0);
    }

    #[test]
    fn lr_examples() {
        let s = LrSchedule::default();
        assert_eq!(s.at(1), 0.1);
        assert_abs_diff_eq!(s.at(51), 0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(s.at(150), 0.001, epsilon = 1e-15);
        assert_eq!(s.at(50), 0.1);
    }

    proptest! {
        #[test]
        fn lambda_is_monotone(ini in -3.0f64..3.0, lst in -3.0f64..3.0, e in 2usize..300) {
            let s = LambdaSchedule::new(ini, lst, e).unwrap();
            let values: Vec<f64> = (1..=e).map(|t| s.at(t)).collect();
            for w in values.windows(2) {
                if lst >= ini {
                    prop_assert!(w[1] >= w[0]);
                } else {
                    prop_assert!(w[1] <= w[0]);
                }
            }
            prop_assert_eq!(values[0], ini);
            prop_assert_eq!(values[e - 1], lst);
        }

        #[test]
        fn lr_drop_count(e in 1usize..300, period in 1usize..60) {
            let s = LrSchedule { period, ..LrSchedule::default() };
            let drops = (1..e).filter(|&t| s.at(t + 1) < s.at(t)).count();
            prop_assert_eq!(drops, (e - 1) / period);
            prop_assert!(s.at(e) > 0.0);
        }
    }
}
