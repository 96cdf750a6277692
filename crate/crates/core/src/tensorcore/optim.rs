//! First-order optimizers over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{CramError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    /// Steps over which the learning rate ramps linearly up to `lr`.
    warmup: u64,
    steps: u64,
    /// (first, second) moments, indexed like the parameter store.
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(CramError::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(CramError::InvalidArgument(format!(
                "weight decay must be non-negative, got {weight_decay}"
            )));
        }
        Ok(Optimizer {
            kind,
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup: 0,
            steps: 0,
            moments: Vec::new(),
        })
    }

    pub fn sgd(lr: f64, weight_decay: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, lr, weight_decay)
    }

    pub fn adam(lr: f64, weight_decay: f64) -> Result<Self> {
        Self::new(OptimizerKind::Adam, lr, weight_decay)
    }

    /// Ramp the learning rate linearly over the first `steps` updates.
    pub fn with_warmup(mut self, steps: u64) -> Self {
        self.warmup = steps;
        self
    }

    /// Learning rate used by the next call to [`Optimizer::step`].
    pub fn current_lr(&self) -> f64 {
        let next = self.steps + 1;
        if next < self.warmup {
            self.lr * next as f64 / self.warmup as f64
        } else {
            self.lr
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Apply one update from the accumulated gradients, then clear them.
    ///
    /// Parameters without a gradient are left untouched. A non-finite
    /// gradient aborts the step before any parameter changes.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        for p in params.iter() {
            if let Some(g) = &p.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(CramError::NonFinite(format!("gradient of `{}`", p.name)));
                }
            }
        }
        let lr = self.current_lr();
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), (Vec::new(), Vec::new()));
        }
        for (p, (m, v)) in params.iter_mut().zip(self.moments.iter_mut()) {
            let Some(grad) = p.grad.take() else { continue };
            let w = p.tensor.data_mut();
            // Head growth appends rows; new entries start with zero moments.
            if m.len() != w.len() {
                m.resize(w.len(), 0.0);
                v.resize(w.len(), 0.0);
            }
            for i in 0..w.len() {
                let g = grad[i] + self.weight_decay * w[i];
                match self.kind {
                    OptimizerKind::Sgd => w[i] -= lr * g,
                    OptimizerKind::Adam => {
                        m[i] = b1 * m[i] + (1.0 - b1) * g;
                        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                        let m_hat = m[i] / bias1;
                        let v_hat = v[i] / bias2;
                        w[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}
