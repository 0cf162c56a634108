//! Adam with an inverse-square-root warmup schedule.

use serde::{Deserialize, Serialize};

use super::params::{Grads, Group, ParamStore};
use crate::error::{ApeError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr_base: f64,
    pub warmup: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr_base: 0.04,
            warmup: 400,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

impl AdamConfig {
    /// `lr_base * min(t^-0.5, t * warmup^-1.5)`, peaking at `t = warmup`.
    pub fn learning_rate(&self, step: u64) -> f64 {
        let t = step.max(1) as f64;
        let w = self.warmup.max(1) as f64;
        self.lr_base * t.powf(-0.5).min(t * w.powf(-1.5))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub cfg: AdamConfig,
    /// Optimizer steps taken so far; drives the schedule.
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    /// Updates applied to each parameter; drives bias correction.
    pub param_steps: Vec<u64>,
}

impl OptimizerState {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.len()]).collect::<Vec<_>>();
        OptimizerState {
            cfg,
            step: 0,
            first: zeros(),
            second: zeros(),
            param_steps: vec![0; params.len()],
        }
    }

    /// One Adam update on the parameters whose group `select` accepts.
    /// Fails before touching anything if a selected gradient is not finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, select: impl Fn(Group) -> bool) -> Result<()> {
        assert_eq!(grads.len(), params.len(), "gradient layout differs from parameters");
        for (i, p) in params.iter().enumerate() {
            if select(p.group) && grads.by_index(i).iter().any(|g| !g.is_finite()) {
                return Err(ApeError::NonFiniteGradient(p.name.clone()));
            }
        }
        self.step += 1;
        let lr = self.cfg.learning_rate(self.step);
        let AdamConfig { beta1, beta2, eps, .. } = self.cfg;
        for (i, p) in params.iter_mut().enumerate() {
            if !select(p.group) {
                continue;
            }
            self.param_steps[i] += 1;
            let t = self.param_steps[i] as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let mut changed = false;
            for (((w, &g), mi), vi) in p.value.iter_mut().zip(grads.by_index(i)).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let delta = lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                if delta != 0.0 {
                    *w -= delta;
                    changed = true;
                }
            }
            if changed {
                p.version += 1;
            }
        }
        Ok(())
    }
}
