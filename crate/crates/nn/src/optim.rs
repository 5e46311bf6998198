use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::float::{cst, Float};
use crate::graph::Grads;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Parameter gradients detached from their graph, so several backward
/// passes can be combined before an update.
#[derive(Clone, Debug, Default)]
pub struct GradBuf<T: Float> {
    map: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Float> GradBuf<T> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    pub fn from_grads(g: &Grads<T>) -> Self {
        let mut b = Self::new();
        b.add_scaled(g, 1.0);
        b
    }

    /// `self += s · g` for every parameter gradient in `g`.
    pub fn add_scaled(&mut self, g: &Grads<T>, s: f64) {
        for (id, t) in g.params() {
            let t = if s != 1.0 { t.scale(cst(s)) } else { t.clone() };
            self.add_tensor(id, &t);
        }
    }

    pub fn add_tensor(&mut self, id: ParamId, t: &Tensor<T>) {
        match self.map.get_mut(&id) {
            Some(e) => e.add_assign(t),
            None => {
                self.map.insert(id, t.clone());
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|t| t.all_finite())
    }
}

/// Adam over a fixed subset of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam<T: Float> {
    pub cfg: AdamConfig,
    pub step: u64,
    ids: Vec<ParamId>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<T>, ids: Vec<ParamId>) -> Self {
        let m = ids.iter().map(|&id| Tensor::zeros(store.get(id).shape())).collect::<Vec<_>>();
        Self { cfg, step: 0, v: m.clone(), m, ids }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    /// One update. Parameters without a gradient in `grads` are skipped.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>) {
        self.step_with(store, |id| grads.param(id));
    }

    pub fn step_buf(&mut self, store: &mut ParamStore<T>, grads: &GradBuf<T>) {
        self.step_with(store, |id| grads.get(id));
    }

    fn step_with<'a>(&mut self, store: &mut ParamStore<T>, lookup: impl Fn(ParamId) -> Option<&'a Tensor<T>>)
    where
        T: 'a,
    {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let step_size = cst::<T>(self.cfg.lr / c1);
        let c2s = cst::<T>(c2.sqrt());
        let eps = cst::<T>(self.cfg.eps);
        let (b1t, b2t) = (cst::<T>(b1), cst::<T>(b2));
        let (ob1, ob2) = (T::one() - b1t, T::one() - b2t);
        for (k, &id) in self.ids.iter().enumerate() {
            let Some(g) = lookup(id) else { continue };
            if !store.trainable(id) {
                continue;
            }
            let p = store.get_mut(id).data_mut();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1t * m[i] + ob1 * gi;
                v[i] = b2t * v[i] + ob2 * gi * gi;
                p[i] -= step_size * m[i] / (v[i].sqrt() / c2s + eps);
            }
        }
    }

    /// Moment tensors as `(name, tensor)` pairs for checkpointing.
    pub fn state(&self, prefix: &str, store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (k, &id) in self.ids.iter().enumerate() {
            out.push((format!("{prefix}.m.{}", store.name(id)), self.m[k].clone()));
            out.push((format!("{prefix}.v.{}", store.name(id)), self.v[k].clone()));
        }
        out
    }

    pub fn load_state(&mut self, prefix: &str, store: &ParamStore<T>, lookup: impl Fn(&str) -> Option<Tensor<T>>) -> bool {
        let mut ok = true;
        for (k, &id) in self.ids.iter().enumerate() {
            match (
                lookup(&format!("{prefix}.m.{}", store.name(id))),
                lookup(&format!("{prefix}.v.{}", store.name(id))),
            ) {
                (Some(m), Some(v)) if m.shape() == self.m[k].shape() && v.shape() == self.v[k].shape() => {
                    self.m[k] = m;
                    self.v[k] = v;
                }
                _ => ok = false,
            }
        }
        ok
    }
}
