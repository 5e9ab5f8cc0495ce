//! Adam and the halve-on-plateau learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Parameters;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub const DEFAULT_LR: f64 = 1e-4;

    /// Zeroed moments for `params` with β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    pub fn new<P: Parameters>(params: &P, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        let n = params.param_count();
        Ok(AdamState {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        })
    }

    /// One Adam update of `params` along `grads`.
    ///
    /// A non-finite gradient aborts before anything is modified.
    pub fn apply<P: Parameters>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let g = grads.flatten();
        if g.len() != self.m.len() || params.param_count() != self.m.len() {
            return Err(Error::rejected(format!(
                "optimizer tracks {} parameters, got {} gradients for {} parameters",
                self.m.len(),
                g.len(),
                params.param_count()
            )));
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            let mut name = String::new();
            let mut pos = 0;
            grads.visit(&mut |n, t| {
                if name.is_empty() && i < pos + t.len() {
                    name = format!("{n}[{}]", i - pos);
                }
                pos += t.len();
            });
            return Err(Error::Divergence(format!(
                "non-finite gradient {} at {name} (optimizer step {})",
                g[i],
                self.step + 1
            )));
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for ((m, v), g) in self.m.iter_mut().zip(self.v.iter_mut()).zip(&g) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
        }
        let (m, v, lr, eps) = (&self.m, &self.v, self.lr, self.eps);
        let mut pos = 0;
        params.visit_mut(&mut |_, t| {
            for (k, theta) in t.iter_mut().enumerate() {
                let m_hat = m[pos + k] / c1;
                let v_hat = v[pos + k] / c2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            pos += t.len();
        });
        Ok(())
    }
}

/// Halves the learning rate after `patience` consecutive epochs without a
/// new best validation BPC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub patience: usize,
    pub factor: f64,
    pub best_val_bpc: Option<f64>,
    pub stale_epochs: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            patience: 2,
            factor: 0.5,
            best_val_bpc: None,
            stale_epochs: 0,
        }
    }
}

impl LrSchedule {
    /// Records one epoch's validation BPC; returns true if `lr` was halved.
    pub fn step(&mut self, val_bpc: f64, lr: &mut f64) -> Result<bool> {
        if !val_bpc.is_finite() {
            return Err(Error::Divergence(format!("validation BPC is {val_bpc}")));
        }
        match self.best_val_bpc {
            Some(best) if val_bpc >= best => self.stale_epochs += 1,
            _ => {
                self.best_val_bpc = Some(val_bpc);
                self.stale_epochs = 0;
            }
        }
        if self.stale_epochs >= self.patience {
            *lr *= self.factor;
            self.stale_epochs = 0;
            return Ok(true);
        }
        Ok(false)
    }
}
