//! Adaptive-moment optimizer with an inverse-square-root warmup schedule.
//!
//! The learning rate at step `t` (1-based) is
//! `peak * min(t / warmup, sqrt(warmup / t))`: linear warmup to the peak,
//! then inverse-square-root decay. Updates are plain Adam with bias
//! correction; everything is deterministic.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::model::ParamMap;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OptimError {
    #[error("invalid optimizer settings: {0}")]
    InvalidSettings(String),
    #[error("gradient for {0} is missing or has the wrong length")]
    GradMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerSettings {
    pub peak_lr: f64,
    pub warmup_steps: usize,
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(OptimError::InvalidSettings(alloc::format!(
                "peak_lr = {} must be positive and finite",
                self.peak_lr
            )));
        }
        if self.warmup_steps == 0 {
            return Err(OptimError::InvalidSettings("warmup_steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Warmup-then-decay schedule; `step` is 1-based.
pub fn learning_rate(step: usize, peak: f64, warmup: usize) -> f64 {
    debug_assert!(step >= 1 && warmup >= 1);
    let s = step as f64;
    let w = warmup as f64;
    let ramp = s / w;
    let decay = libm::sqrt(w / s);
    peak * if ramp < decay { ramp } else { decay }
}

pub struct Adam {
    settings: OptimizerSettings,
    step: usize,
    first_moment: BTreeMap<String, Vec<f64>>,
    second_moment: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(settings: OptimizerSettings) -> Result<Self, OptimError> {
        settings.validate()?;
        Ok(Adam {
            settings,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One update over every parameter, in name order.
    pub fn step(
        &mut self,
        params: &mut ParamMap,
        grads: &BTreeMap<String, Vec<f64>>,
    ) -> Result<(), OptimError> {
        self.step += 1;
        let lr = learning_rate(self.step, self.settings.peak_lr, self.settings.warmup_steps);
        let bc1 = 1.0 - libm::pow(ADAM_BETA1, self.step as f64);
        let bc2 = 1.0 - libm::pow(ADAM_BETA2, self.step as f64);
        for (name, param) in params.iter_mut() {
            let grad = grads
                .get(name)
                .filter(|g| g.len() == param.data.len())
                .ok_or_else(|| OptimError::GradMismatch(name.clone()))?;
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; param.data.len()]);
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; param.data.len()]);
            for i in 0..param.data.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grad[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                param.data[i] -= lr * m_hat / (libm::sqrt(v_hat) + ADAM_EPS);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamData;
    use alloc::string::ToString;

    #[test]
    fn schedule_hits_peak_at_warmup_and_halves_at_4x() {
        let peak = 0.02;
        let warmup = 100;
        assert!((learning_rate(100, peak, warmup) - peak).abs() < 1e-15);
        assert!((learning_rate(400, peak, warmup) - peak / 2.0).abs() < 1e-15);
        assert!(learning_rate(1, peak, warmup) < peak);
        assert!(learning_rate(10_000, peak, warmup) < peak / 2.0);
    }

    #[test]
    fn zero_gradients_leave_fresh_params_unchanged() {
        let mut params = ParamMap::new();
        params.insert(
            "w".into(),
            ParamData { shape: alloc::vec![2], data: alloc::vec![1.5, -0.5] },
        );
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), alloc::vec![0.0, 0.0]);
        let mut adam = Adam::new(OptimizerSettings { peak_lr: 0.1, warmup_steps: 10 }).unwrap();
        adam.step(&mut params, &grads).unwrap();
        assert_eq!(params["w"].data, alloc::vec![1.5, -0.5]);
    }

    #[test]
    fn updates_are_deterministic_and_descend() {
        let make = || {
            let mut p = ParamMap::new();
            p.insert("w".into(), ParamData { shape: alloc::vec![1], data: alloc::vec![2.0] });
            p
        };
        let run = || {
            let mut params = make();
            let mut adam = Adam::new(OptimizerSettings { peak_lr: 0.05, warmup_steps: 2 }).unwrap();
            for _ in 0..20 {
                // grad of (w - 1)^2 / 2
                let g = params["w"].data[0] - 1.0;
                let mut grads = BTreeMap::new();
                grads.insert("w".to_string(), alloc::vec![g]);
                adam.step(&mut params, &grads).unwrap();
            }
            params["w"].data[0]
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert!((a - 1.0).abs() < 1.0, "moved toward the minimum: {a}");
    }

    #[test]
    fn settings_validation() {
        assert!(Adam::new(OptimizerSettings { peak_lr: 0.0, warmup_steps: 5 }).is_err());
        assert!(Adam::new(OptimizerSettings { peak_lr: 0.1, warmup_steps: 0 }).is_err());
    }
}
