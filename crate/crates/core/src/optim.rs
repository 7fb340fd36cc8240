//! Adam with bias correction, plus the cosine learning-rate schedule used
//! by synthesis and distillation.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// One update over a fixed-order parameter list. `grads[i]` pairs with
    /// `params[i]`; the list must keep the same order and sizes across
    /// steps.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid(
                "adam",
                format!("{} params vs {} grads", params.len(), grads.len()),
            ));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.m.len() != params.len() {
            return Err(Error::invalid(
                "adam",
                format!("parameter list changed: {} vs {}", self.m.len(), params.len()),
            ));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i];
            if g.len() != p.numel() {
                return Err(Error::invalid(
                    "adam",
                    format!("param {i}: {} elements vs grad {}", p.numel(), g.len()),
                ));
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let data = p.data_mut();
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                data[j] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new()
    }
}

/// Cosine annealing from `lr0` down to zero across `total` steps:
/// lr(t) = lr0 * 0.5 * (1 + cos(pi * t / total)).
pub fn cosine_lr(lr0: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = (step.min(total) as f64) / (total as f64);
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}
