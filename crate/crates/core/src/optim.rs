//! Adam with per-tensor moment buffers keyed by parameter name.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{invalid, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Descent,
    Ascent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Self {
        let zeros: BTreeMap<String, Tensor> = params
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
            .collect();
        Self {
            cfg,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Moment buffers match the parameter layout.
    pub fn matches(&self, params: &ParamStore) -> bool {
        self.m.len() == params.len()
            && params.iter().all(|(n, t)| {
                self.m.get(n).is_some_and(|m| m.shape() == t.shape())
                    && self.v.get(n).is_some_and(|v| v.shape() == t.shape())
            })
    }

    /// One update from the gradient buffers held by `params`.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64, dir: Direction) -> Result<()> {
        if !self.matches(params) {
            return Err(invalid("Adam state does not match parameter layout"));
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - beta2.powi(self.t.min(i32::MAX as u64) as i32);
        let sign = match dir {
            Direction::Descent => -1.0,
            Direction::Ascent => 1.0,
        };
        let grads = params.grads().clone();
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.get_mut(name).expect("layout checked");
            let v = self.v.get_mut(name).expect("layout checked");
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p += sign * lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
