//! AdamW with decoupled weight decay, and the per-epoch learning-rate schedule.

use crate::error::{invalid, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
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
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0 && self.weight_decay >= 0.0;
        if !ok {
            return Err(invalid("adamw", format!("invalid hyperparameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Number of applied updates.
    pub steps: u64,
    /// Number of updates skipped because a gradient was not finite.
    pub skipped: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let zeros = || store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Ok(Self {
            cfg,
            m: zeros(),
            v: zeros(),
            steps: 0,
            skipped: 0,
        })
    }

    /// Applies one update with learning rate `lr` using the gradients stored
    /// on the parameters. Returns `false` (and leaves everything untouched)
    /// when any gradient entry is NaN or infinite.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<bool> {
        if !(lr > 0.0) {
            return Err(invalid("adamw", format!("learning rate must be positive, got {lr}")));
        }
        let finite = store
            .iter()
            .all(|(_, t)| t.grad.as_ref().map_or(true, |g| g.iter().all(|x| x.is_finite())));
        if !finite {
            self.skipped += 1;
            return Ok(false);
        }
        self.steps += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        for (((_, t), m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(grad) = t.grad.take() else { continue };
            if !t.requires_grad {
                continue;
            }
            for (((w, g), m), v) in t.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *w -= lr * c.weight_decay * *w;
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
            }
            t.grad = Some(grad);
        }
        Ok(true)
    }
}

/// Scales all gradients so that their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .filter_map(|(_, t)| t.grad.as_ref())
        .flatten()
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for (_, t) in store.iter_mut() {
            if let Some(g) = t.grad.as_mut() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}

/// Learning rate during epoch `epoch` (0-based): `lr · decay^epoch`.
pub fn lr_at_epoch(lr: f64, decay: f64, epoch: usize) -> f64 {
    lr * decay.powi(epoch as i32)
}
