//! Named parameter store with per-parameter Adam state, global-norm gradient
//! clipping, and weight initializers.

use crate::error::{Result, SprError};
use crate::num::Element;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Param<E: Element> {
    pub value: Tensor<E>,
    pub grad: Option<Tensor<E>>,
    pub m: Tensor<E>,
    pub v: Tensor<E>,
    pub t: u64,
}

impl<E: Element> Param<E> {
    fn new(value: Tensor<E>) -> Self {
        let shape = value.shape();
        Param { value, grad: None, m: Tensor::zeros(shape), v: Tensor::zeros(shape), t: 0 }
    }
}

/// Map from parameter path to value + optimizer state. Paths are unique;
/// iteration order is lexicographic (BTreeMap), which keeps every gradient
/// reduction and checkpoint layout deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<E: Element> {
    params: BTreeMap<String, Param<E>>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, path: &str, value: Tensor<E>) -> Result<()> {
        if self.params.contains_key(path) {
            return Err(SprError::bad_arg("param_store", format!("duplicate parameter path {path}")));
        }
        self.params.insert(path.to_string(), Param::new(value));
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&Param<E>> {
        self.params.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Param<E>> {
        self.params.get_mut(path)
    }

    pub fn value(&self, path: &str) -> &Tensor<E> {
        &self.params.get(path).unwrap_or_else(|| panic!("unknown parameter {path}")).value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<E>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<E>)> {
        self.params.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn clear_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    pub fn set_grad(&mut self, path: &str, grad: Tensor<E>) {
        if let Some(p) = self.params.get_mut(path) {
            p.grad = Some(grad);
        }
    }

    /// Global 2-norm of all populated gradients.
    pub fn grad_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for p in self.params.values() {
            if let Some(g) = &p.grad {
                for &v in g.data() {
                    let v = v.to_f64();
                    acc += v * v;
                }
            }
        }
        acc.sqrt()
    }

    /// Scales all gradients so the global 2-norm is at most `max_norm`.
    /// Returns the pre-clip norm.
    pub fn clip_gradients(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = E::from_f64(max_norm / norm);
            for p in self.params.values_mut() {
                if let Some(g) = &mut p.grad {
                    for v in g.data_mut() {
                        *v *= scale;
                    }
                }
            }
        }
        norm
    }

    /// One Adam update with bias correction over every parameter that has a
    /// gradient; parameters without one are skipped with a warning.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        let b1 = E::from_f64(cfg.beta1);
        let b2 = E::from_f64(cfg.beta2);
        let one_m_b1 = E::from_f64(1.0 - cfg.beta1);
        let one_m_b2 = E::from_f64(1.0 - cfg.beta2);
        let eps = E::from_f64(cfg.eps);
        for (path, p) in self.params.iter_mut() {
            let Some(g) = &p.grad else {
                eprintln!("adam_step: no gradient for {path}, skipped");
                continue;
            };
            p.t += 1;
            let c1 = E::from_f64(1.0 / (1.0 - cfg.beta1.powi(p.t as i32)));
            let c2 = E::from_f64(1.0 / (1.0 - cfg.beta2.powi(p.t as i32)));
            let lr = E::from_f64(cfg.lr);
            let md = p.m.data_mut();
            let vd = p.v.data_mut();
            let pd = p.value.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = b1 * md[i] + one_m_b1 * gi;
                vd[i] = b2 * vd[i] + one_m_b2 * gi * gi;
                let m_hat = md[i] * c1;
                let v_hat = vd[i] * c2;
                pd[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// He-style normal init: std = sqrt(2 / fan_in).
pub fn he_normal<E: Element>(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<E> {
    let fan_in = shape[1] * shape[2] * shape[3];
    Tensor::randn(shape, (2.0 / fan_in.max(1) as f64).sqrt(), rng)
}

pub fn normal<E: Element>(shape: [usize; 4], std: f64, rng: &mut ChaCha8Rng) -> Tensor<E> {
    Tensor::randn(shape, std, rng)
}
