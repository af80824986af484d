//! Named parameter tensors, initializers, and the AdamW optimizer.

use std::collections::HashMap;

use ndarray::Zip;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tape::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    /// Panics on unknown names; use for parameters the caller created.
    pub fn expect(&self, name: &str) -> ParamId {
        self.id(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual linear-layer default.
pub fn uniform_fan_in<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, rows: usize, cols: usize) -> Mat {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Mat::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Mat {
    let dist = Normal::new(0.0, std).expect("std must be finite and positive");
    Mat::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Decoupled weight-decay Adam. Moments are created lazily for parameters
/// that receive gradients.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    moments: HashMap<ParamId, (Mat, Mat)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Mat)]) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (id, g) in grads {
            let p = store.value_mut(*id);
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (Mat::zeros(p.dim()), Mat::zeros(p.dim())));
            Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *p -= c.lr * c.weight_decay * *p;
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= c.lr * mh / (vh.sqrt() + c.eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Mat::from_elem((1, 2), 1.0));
        let mut opt = AdamW::new(AdamWConfig::new(0.1, 0.0));
        opt.update(&mut store, &[(id, Mat::from_shape_vec((1, 2), vec![3.0, -0.5]).unwrap())]);
        let w = store.value(id);
        assert!((w[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((w[[0, 1]] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut store = ParamStore::new();
        let id = store.add("w", Mat::from_elem((1, 1), 2.0));
        let mut opt = AdamW::new(AdamWConfig::new(0.1, 0.5));
        opt.update(&mut store, &[(id, Mat::zeros((1, 1)))]);
        assert!((store.value(id)[[0, 0]] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Mat::from_elem((1, 1), 5.0));
        let mut opt = AdamW::new(AdamWConfig::new(0.05, 0.0));
        for _ in 0..2000 {
            let x = store.value(id)[[0, 0]];
            opt.update(&mut store, &[(id, Mat::from_elem((1, 1), 2.0 * (x - 1.0)))]);
        }
        assert!((store.value(id)[[0, 0]] - 1.0).abs() < 1e-2);
    }
}
