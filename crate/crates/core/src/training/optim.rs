//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::model::ParamStore;
use crate::tensor::Tensor;

/// `lr_init · ½(1 + cos(π·step/total))`; reaches zero at `step == total`.
pub fn cosine_lr(lr_init: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr_init;
    }
    let t = step.min(total) as f64 / total as f64;
    lr_init * 0.5 * (1.0 + (PI * t).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Optimizer state, one moment pair per parameter in store order.
#[derive(Clone, Debug)]
pub struct AdamW {
    settings: AdamWSettings,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, settings: AdamWSettings) -> Self {
        let zeros = || {
            store
                .params()
                .iter()
                .map(|p| vec![0.0; p.value.numel()])
                .collect()
        };
        AdamW {
            settings,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update. Frozen parameters and parameters without a
    /// gradient are left untouched; weight decay applies to matrices only.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        self.t += 1;
        let AdamWSettings {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.settings;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (i, param) in store.params_mut().iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            if param.group.is_frozen() {
                continue;
            }
            let decay = if param.value.rank() >= 2 {
                weight_decay
            } else {
                0.0
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in param.value.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                *w -= lr * (update + decay * *w);
            }
        }
    }
}
