//! AdamW with decoupled weight decay and the warmup-cosine learning-rate schedule.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{ParamStore, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Moment estimates and step counter for every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: HashMap<String, Vec<f64>>,
    pub v: HashMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// One AdamW update at learning rate `lr`. Consumes the gradients stored on
    /// the trainable parameters; frozen parameters are never touched.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<(), TensorError> {
        if let Some(p) = store.iter().find(|p| p.trainable && p.tensor.grad.is_none()) {
            return Err(TensorError::MissingGradient(p.name.clone()));
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for p in store.iter_mut().filter(|p| p.trainable) {
            let grad = p.tensor.grad.take().expect("checked above");
            let n = grad.len();
            let m = self.m.entry(p.name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(p.name.clone()).or_insert_with(|| vec![0.0; n]);
            let decay = if p.decay { 1.0 - lr * weight_decay } else { 1.0 };
            for (((w, g), mi), vi) in p.tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *w *= decay;
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            if p.tensor.data().iter().any(|w| !w.is_finite()) {
                return Err(TensorError::NonFinite { op: "adamw_step" });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("invalid schedule: {0}")]
    Invalid(String),
    #[error("step {step} outside schedule range [0, {total}]")]
    StepOutOfRange { step: u64, total: u64 },
}

/// Linear warmup from `warmup_lr` to `max_lr`, then cosine decay to `min_lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub max_lr: f64,
    pub warmup_lr: f64,
    #[serde(default)]
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl ScheduleConfig {
    /// Peak 1e-5 and warmup start 1e-6, as used for both fine-tuning stages.
    pub fn standard(warmup_steps: u64, total_steps: u64) -> Self {
        Self {
            max_lr: 1e-5,
            warmup_lr: 1e-6,
            min_lr: 0.0,
            warmup_steps,
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        let bad = |m: &str| Err(ScheduleError::Invalid(m.to_string()));
        if self.warmup_steps == 0 {
            return bad("warmup_steps must be positive");
        }
        if self.warmup_steps >= self.total_steps {
            return bad("warmup_steps must be less than total_steps");
        }
        if self.warmup_lr > self.max_lr {
            return bad("warmup_lr must not exceed max_lr");
        }
        if self.min_lr > self.max_lr {
            return bad("min_lr must not exceed max_lr");
        }
        if ![self.max_lr, self.warmup_lr, self.min_lr].iter().all(|v| v.is_finite() && *v >= 0.0) {
            return bad("learning rates must be finite and non-negative");
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> Result<f64, ScheduleError> {
        self.validate()?;
        if step > self.total_steps {
            return Err(ScheduleError::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        if step < self.warmup_steps {
            let frac = step as f64 / self.warmup_steps as f64;
            return Ok(self.warmup_lr + (self.max_lr - self.warmup_lr) * frac);
        }
        let progress = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        Ok(self.min_lr + (self.max_lr - self.min_lr) * cosine)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(w: f64, grad: Option<f64>, trainable: bool) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(w), true).unwrap();
        s.set_trainable("w", trainable).unwrap();
        s.get_mut("w").unwrap().tensor.grad = grad.map(|g| vec![g]);
        s
    }

    #[test]
    fn decay_only_path() {
        let mut s = store_with(2.0, Some(0.0), true);
        let mut opt = OptimizerState::new(AdamWConfig::default());
        opt.step(&mut s, 0.1).unwrap();
        assert_eq!(s.get("w").unwrap().tensor.item(), 2.0 * (1.0 - 0.1 * 0.05));
    }

    #[test]
    fn one_step_matches_hand_computation() {
        // w=1, g=1, lr=1e-3, step 1:
        // decay: 1 - 1e-3*0.05 = 0.99995
        // m = 0.1, v = 0.001, m_hat = 1, v_hat = 1 → update = 1e-3 * 1/(1+1e-8)
        let mut s = store_with(1.0, Some(1.0), true);
        let mut opt = OptimizerState::new(AdamWConfig::default());
        opt.step(&mut s, 1e-3).unwrap();
        let expected = 0.99995 - 1e-3 / (1.0 + 1e-8);
        assert!((s.get("w").unwrap().tensor.item() - expected).abs() < 1e-15);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn frozen_parameter_is_bit_identical() {
        let mut s = store_with(0.123456789, None, false);
        let before = s.get("w").unwrap().tensor.item().to_bits();
        let mut opt = OptimizerState::new(AdamWConfig::default());
        opt.step(&mut s, 0.5).unwrap();
        assert_eq!(s.get("w").unwrap().tensor.item().to_bits(), before);
        assert!(s.get("w").unwrap().tensor.grad.is_none());
    }

    #[test]
    fn missing_gradient_rejected() {
        let mut s = store_with(1.0, None, true);
        let mut opt = OptimizerState::new(AdamWConfig::default());
        assert_eq!(
            opt.step(&mut s, 0.1),
            Err(TensorError::MissingGradient("w".into()))
        );
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = ScheduleConfig::standard(10, 100);
        assert_eq!(cfg.lr_at(0).unwrap(), 1e-6);
        assert_eq!(cfg.lr_at(10).unwrap(), 1e-5);
        assert_eq!(cfg.lr_at(100).unwrap(), 0.0);
        assert!(matches!(cfg.lr_at(101), Err(ScheduleError::StepOutOfRange { .. })));
    }

    #[test]
    fn schedule_rejects_bad_config() {
        let mut cfg = ScheduleConfig::standard(10, 10);
        assert!(cfg.validate().is_err());
        cfg.total_steps = 20;
        cfg.warmup_lr = 1.0;
        assert!(cfg.validate().is_err());
    }
}
