//! Rank-4 row-major tensor [N, C, H, W].

use crate::error::{Result, SprError};
use crate::num::Element;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Element> {
    shape: [usize; 4],
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![E::ZERO; n] }
    }

    pub fn full(shape: [usize; 4], v: E) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![v; n] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<E>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(SprError::bad_arg(
                "from_vec",
                format!("data length {} does not match shape {:?}", data.len(), shape),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: E) -> Self {
        Tensor { shape: [1, 1, 1, 1], data: vec![v] }
    }

    /// Standard-normal fill scaled by `std`, deterministic per rng state.
    pub fn randn(shape: [usize; 4], std: f64, rng: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            // Box-Muller from two uniforms; avoids a rand_distr dependency.
            let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            data.push(E::from_f64(z * std));
        }
        Tensor { shape, data }
    }

    /// Uniform fill over [lo, hi).
    pub fn rand_uniform(shape: [usize; 4], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| E::from_f64(rng.random_range(lo..hi))).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> E {
        let [_, cs, hs, ws] = self.shape;
        self.data[((n * cs + c) * hs + h) * ws + w]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut E {
        let [_, cs, hs, ws] = self.shape;
        &mut self.data[((n * cs + c) * hs + h) * ws + w]
    }

    /// Reinterpret as a different shape with the same element count.
    pub fn reshaped(mut self, shape: [usize; 4]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(SprError::ShapeMismatch { op: "reshape", left: self.shape, right: shape });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, E> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map<F: Fn(E) -> E>(&self, f: F) -> Self {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn to_f64_tensor(&self) -> Tensor<f64> {
        Tensor { shape: self.shape, data: self.data.iter().map(|v| v.to_f64()).collect() }
    }

    pub fn from_f64_tensor(src: &Tensor<f64>) -> Self {
        Tensor { shape: src.shape, data: src.data.iter().map(|&v| E::from_f64(v)).collect() }
    }
}
