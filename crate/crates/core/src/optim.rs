//! AdamW (decoupled weight decay) and SGD with momentum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1.5e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect()
        };
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update of the `trainable` parameters at learning rate `lr`.
    pub fn update(
        &mut self,
        store: &mut ParamStore,
        grads: &Grads,
        trainable: &[ParamId],
        lr: f64,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for &id in trainable {
            let g = grads.get(id).data();
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * p[i]);
            }
        }
    }

    /// Moment tensors, named after the parameters they track.
    pub fn state_tensors(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for id in store.ids() {
            out.push((format!("adamw.m.{}", store.name(id)), self.m[id.0].clone()));
            out.push((format!("adamw.v.{}", store.name(id)), self.v[id.0].clone()));
        }
        out
    }

    pub fn restore(
        cfg: AdamWConfig,
        step: u64,
        store: &ParamStore,
        lookup: impl Fn(&str) -> Option<Tensor>,
    ) -> Result<Self> {
        let mut opt = Self::new(cfg, store);
        opt.step = step;
        for id in store.ids() {
            for (prefix, slot) in [("adamw.m.", &mut opt.m), ("adamw.v.", &mut opt.v)] {
                let name = format!("{prefix}{}", store.name(id));
                let t = lookup(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {name}")))?;
                if t.shape() != store.get(id).shape() {
                    return Err(Error::Checkpoint(format!(
                        "optimizer tensor {name} has the wrong shape"
                    )));
                }
                slot[id.0] = t;
            }
        }
        Ok(opt)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub cfg: SgdConfig,
    pub step: u64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig, store: &ParamStore) -> Self {
        Self {
            cfg,
            step: 0,
            velocity: store
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        let c = &self.cfg;
        let first = self.step == 0;
        self.step += 1;
        for id in store.ids().collect::<Vec<_>>() {
            let g = grads.get(id).data();
            let buf = self.velocity[id.0].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let d = g[i] + c.weight_decay * p[i];
                buf[i] = if first { d } else { c.momentum * buf[i] + d };
                p[i] -= lr * buf[i];
            }
        }
    }

    pub fn state_tensors(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        store
            .ids()
            .map(|id| {
                (
                    format!("sgd.v.{}", store.name(id)),
                    self.velocity[id.0].clone(),
                )
            })
            .collect()
    }

    pub fn restore(
        cfg: SgdConfig,
        step: u64,
        store: &ParamStore,
        lookup: impl Fn(&str) -> Option<Tensor>,
    ) -> Result<Self> {
        let mut opt = Self::new(cfg, store);
        opt.step = step;
        for id in store.ids() {
            let name = format!("sgd.v.{}", store.name(id));
            let t = lookup(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {name}")))?;
            if t.shape() != store.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "optimizer tensor {name} has the wrong shape"
                )));
            }
            opt.velocity[id.0] = t;
        }
        Ok(opt)
    }
}

/// Linear warmup followed by half-cosine decay to `min_frac * base`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub min_frac: f64,
}

impl CosineSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.base * (self.min_frac + (1.0 - self.min_frac) * cos)
    }
}
