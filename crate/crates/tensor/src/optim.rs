use std::collections::HashMap;

use crate::scalar::Scalar;
use crate::store::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: Some(10.0),
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    step: u64,
    moments: HashMap<ParamId, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update; returns the pre-clip global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &HashMap<ParamId, Tensor<T>>) -> f64 {
        self.step += 1;
        // Fixed summation order: map iteration order varies between processes.
        let mut ids: Vec<_> = grads.keys().copied().collect();
        ids.sort();
        let norm = ids
            .iter()
            .flat_map(|id| grads[id].data().iter().map(|v| v.to_f64_lossy().powi(2)))
            .sum::<f64>()
            .sqrt();
        let clip = match self.cfg.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        let c = &self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let g = &grads[&id];
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let p = store.get_mut(id);
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gf = gv.to_f64_lossy() * clip;
                let mf = c.beta1 * mv.to_f64_lossy() + (1.0 - c.beta1) * gf;
                let vf = c.beta2 * vv.to_f64_lossy() + (1.0 - c.beta2) * gf * gf;
                *mv = T::from_f64_lossy(mf);
                *vv = T::from_f64_lossy(vf);
                let mut x = pv.to_f64_lossy();
                x -= c.lr * c.weight_decay * x;
                x -= c.lr * (mf / bc1) / ((vf / bc2).sqrt() + c.eps);
                *pv = T::from_f64_lossy(x);
            }
        }
        norm
    }

    /// Moments as a store (`m.<name>`, `v.<name>`) for checkpointing.
    pub fn export(&self, params: &ParamStore<T>) -> ParamStore<T> {
        let mut out = ParamStore::new();
        let mut ids: Vec<_> = self.moments.keys().copied().collect();
        ids.sort();
        for id in ids {
            let (m, v) = &self.moments[&id];
            let name = params.name(id);
            out.add_buffer(&format!("m.{name}"), m.clone()).unwrap();
            out.add_buffer(&format!("v.{name}"), v.clone()).unwrap();
        }
        out
    }

    /// Restores moments exported by [`Adam::export`].
    pub fn import(&mut self, params: &ParamStore<T>, state: &ParamStore<T>, step: u64) {
        self.step = step;
        self.moments.clear();
        for id in params.trainable_ids() {
            let name = params.name(id);
            if let (Some(m), Some(v)) = (
                state.id(&format!("m.{name}")),
                state.id(&format!("v.{name}")),
            ) {
                self.moments
                    .insert(id, (state.get(m).clone(), state.get(v).clone()));
            }
        }
    }
}
