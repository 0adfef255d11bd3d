//! Adam with bias correction.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::nn::{ParamGrads, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OptimError {
    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },
    #[error("learning rate must be positive, got {0}")]
    LearningRate(f64),
    #[error("gradient shape {grad:?} does not match parameter `{name}` shape {param:?}")]
    Shape {
        name: String,
        grad: Vec<usize>,
        param: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state: first and second moments per parameter plus the step
/// counter used for bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Result<Self, OptimError> {
        if !(config.lr > 0.0) {
            return Err(OptimError::LearningRate(config.lr));
        }
        let first: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
        Ok(Self {
            config,
            step: 0,
            second: first.clone(),
            first,
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Changes the learning rate for subsequent steps, keeping the moments.
    pub fn set_lr(&mut self, lr: f64) -> Result<(), OptimError> {
        if !(lr > 0.0) {
            return Err(OptimError::LearningRate(lr));
        }
        self.config.lr = lr;
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates `params` in place. Every gradient is checked before any
    /// parameter is touched, so a rejected step leaves the store unchanged.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &ParamGrads,
        params: &[ParamId],
    ) -> Result<(), OptimError> {
        for &id in params {
            let g = grads.get(id);
            let p = store.get(id);
            if g.shape() != p.shape() {
                return Err(OptimError::Shape {
                    name: store.name(id).to_string(),
                    grad: g.shape().to_vec(),
                    param: p.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(OptimError::NonFiniteGradient {
                    name: store.name(id).to_string(),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as f64;
        let c1 = 1.0 - libm::pow(beta1, t);
        let c2 = 1.0 - libm::pow(beta2, t);
        for &id in params {
            let g = grads.get(id).data();
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (libm::sqrt(v_hat) + eps);
            }
        }
        Ok(())
    }
}
