use serde::{Deserialize, Serialize};

use super::layers::Param;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, step: 0, m: Vec::new(), v: Vec::new() })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients stored in `params`. Fails without
    /// touching anything if a gradient is non-finite, and afterwards if an
    /// updated value is.
    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
            return Err(Error::Shape("optimizer state does not match the parameters".into()));
        }
        if let Some(i) = params.iter().position(|p| p.grad.iter().any(|g| !g.is_finite())) {
            return Err(Error::NonFiniteGradient(i));
        }
        self.step += 1;
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.value.len() {
                let g = p.grad[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p.value[j] -= learning_rate * mhat / (vhat.sqrt() + epsilon);
            }
            if p.value.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(i));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(value: f64, grad: f64) -> Param {
        Param { shape: vec![1], value: vec![value], grad: vec![grad] }
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        let mut p = scalar(0.7, 0.0);
        for _ in 0..5 {
            adam.step(&mut [&mut p]).unwrap();
        }
        assert_eq!(p.value, vec![0.7]);
        assert_eq!(adam.steps(), 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m = 0.1, v = 0.001; corrected both equal 1, update = -a * 1 / (1 + eps)
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        let mut p = scalar(0.0, 1.0);
        adam.step(&mut [&mut p]).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p.value[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_descends_monotonically() {
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        let mut p = scalar(1.0, 0.5);
        let mut last = p.value[0];
        for _ in 0..50 {
            adam.step(&mut [&mut p]).unwrap();
            assert!(p.value[0] < last);
            last = p.value[0];
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        let mut a = scalar(1.0, 1.0);
        let mut b = scalar(1.0, f64::NAN);
        assert!(matches!(adam.step(&mut [&mut a, &mut b]), Err(Error::NonFiniteGradient(1))));
        assert_eq!(a.value, vec![1.0]);
    }
}
