//! Stochastic gradient descent with classic (heavy-ball) momentum and a
//! cosine learning-rate schedule.
//!
//! The update is v ← m·v + g, p ← p − lr·v, with no dampening and no
//! Nesterov lookahead. A non-finite gradient aborts the step before any
//! parameter is touched, so state stays consistent after the error.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SgdMomentum {
    lr: f64,
    momentum: f64,
    velocities: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Result<SgdMomentum> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Range(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Range(format!("momentum must be in [0, 1), got {momentum}")));
        }
        Ok(SgdMomentum { lr, momentum, velocities: Vec::new() })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Replace the learning rate (used by per-epoch schedules); momentum
    /// buffers are preserved.
    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Range(format!("learning rate must be non-negative, got {lr}")));
        }
        self.lr = lr;
        Ok(())
    }

    /// One momentum update over a fixed list of parameters. The parameter
    /// list must keep the same order and shapes across calls because the
    /// velocity buffers are positional.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dimension(format!(
                "{} params vs {} grads",
                params.len(),
                grads.len()
            )));
        }
        if self.velocities.is_empty() {
            self.velocities = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.velocities.len() != params.len() {
            return Err(Error::Dimension(format!(
                "optimizer state tracks {} params, got {}",
                self.velocities.len(),
                params.len()
            )));
        }
        // Validate everything before mutating anything.
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != g.len() || self.velocities[i].len() != g.len() {
                return Err(Error::Dimension(format!(
                    "param {i}: {} elements vs gradient of {}",
                    p.numel(),
                    g.len()
                )));
            }
            if !g.iter().all(|x| x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for param {i}; step aborted"
                )));
            }
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocities.iter_mut()) {
            let data = p.data_mut();
            for j in 0..g.len() {
                v[j] = self.momentum * v[j] + g[j];
                data[j] -= self.lr * v[j];
            }
        }
        Ok(())
    }
}

/// Cosine-annealed learning rate: base · (1 + cos(π·epoch/total)) / 2.
/// Epoch 0 returns the base rate; epoch == total returns 0.
pub fn cosine_anneal_lr(epoch: usize, total_epochs: usize, base_lr: f64) -> Result<f64> {
    if total_epochs == 0 {
        return Err(Error::Range("cosine schedule needs total_epochs >= 1".into()));
    }
    if epoch > total_epochs {
        return Err(Error::Range(format!(
            "epoch {epoch} beyond schedule length {total_epochs}"
        )));
    }
    if !(base_lr >= 0.0 && base_lr.is_finite()) {
        return Err(Error::Range(format!("base learning rate must be non-negative, got {base_lr}")));
    }
    let phase = std::f64::consts::PI * epoch as f64 / total_epochs as f64;
    Ok(base_lr * (1.0 + phase.cos()) / 2.0)
}
