use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
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
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Adam with decoupled weight decay. Moments are keyed by parameter name
/// and rounded to `f32` like the parameters themselves.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (id, grad) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            let name = store.name(*id).to_string();
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (Tensor::zeros(grad.shape()), Tensor::zeros(grad.shape())));
            let p = store.value_mut(*id);
            for (((pv, g), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * g;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * g * g;
                *mv = *mv as f32 as f64;
                *vv = *vv as f32 as f64;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *pv);
            }
            p.round_f32();
        }
    }

    pub fn moments(&self) -> &BTreeMap<String, (Tensor, Tensor)> {
        &self.moments
    }

    pub fn set_moments(&mut self, name: String, m: Tensor, v: Tensor) {
        self.moments.insert(name, (m, v));
    }
}
