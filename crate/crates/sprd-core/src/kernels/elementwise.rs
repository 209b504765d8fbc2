//! Pointwise kernels and fused loss terms with hand-derived gradients.

use crate::num::Element;
use crate::tensor::Tensor;

pub fn add<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    debug_assert_eq!(a.shape(), b.shape());
    let mut out = a.clone();
    for (o, v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += *v;
    }
    out
}

pub fn mul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    debug_assert_eq!(a.shape(), b.shape());
    let mut out = a.clone();
    for (o, v) in out.data_mut().iter_mut().zip(b.data()) {
        *o = *o * *v;
    }
    out
}

pub fn sigmoid<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    x.map(|v| v.sigmoid())
}

/// d/dx sigmoid from the stored output y: y(1-y).
pub fn sigmoid_vjp<E: Element>(y: &Tensor<E>, dy: &Tensor<E>) -> Tensor<E> {
    let mut out = dy.clone();
    for (o, &yv) in out.data_mut().iter_mut().zip(y.data()) {
        *o = *o * yv * (E::ONE - yv);
    }
    out
}

pub fn relu<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    x.map(|v| v.max(E::ZERO))
}

pub fn relu_vjp<E: Element>(x: &Tensor<E>, dy: &Tensor<E>) -> Tensor<E> {
    let mut out = dy.clone();
    for (o, &xv) in out.data_mut().iter_mut().zip(x.data()) {
        if xv <= E::ZERO {
            *o = E::ZERO;
        }
    }
    out
}

pub fn mul_scalar<E: Element>(x: &Tensor<E>, c: f64) -> Tensor<E> {
    let c = E::from_f64(c);
    x.map(|v| v * c)
}

pub fn sum_all<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let mut acc = E::ZERO;
    for &v in x.data() {
        acc += v;
    }
    Tensor::scalar(acc)
}

/// Per-element focal term on sigmoid logits:
///   target 1: w * alpha * (1-p)^gamma * (-ln p)
///   target 0: w * (1-alpha) * p^gamma * (-ln(1-p))
/// computed via softplus so large logits stay finite. With gamma=0 and
/// alpha=0.5 this is exactly half the binary cross-entropy.
pub fn focal_term<E: Element>(
    x: &Tensor<E>,
    targets: &Tensor<E>,
    weights: &Tensor<E>,
    alpha: f64,
    gamma: f64,
) -> Tensor<E> {
    debug_assert_eq!(x.shape(), targets.shape());
    debug_assert_eq!(x.shape(), weights.shape());
    let a = E::from_f64(alpha);
    let na = E::from_f64(1.0 - alpha);
    let g = E::from_f64(gamma);
    let mut out = Tensor::zeros(x.shape());
    let od = out.data_mut();
    for i in 0..x.numel() {
        let w = weights.data()[i];
        if w == E::ZERO {
            continue;
        }
        let xv = x.data()[i];
        let v = if targets.data()[i] > E::from_f64(0.5) {
            // (1-p)^gamma = exp(-gamma * softplus(x)); -ln p = softplus(-x)
            a * (-(g * xv.softplus())).exp() * (-xv).softplus()
        } else {
            na * (-(g * (-xv).softplus())).exp() * xv.softplus()
        };
        od[i] = w * v;
    }
    out
}

pub fn focal_term_vjp<E: Element>(
    x: &Tensor<E>,
    targets: &Tensor<E>,
    weights: &Tensor<E>,
    alpha: f64,
    gamma: f64,
    dy: &Tensor<E>,
) -> Tensor<E> {
    let a = E::from_f64(alpha);
    let na = E::from_f64(1.0 - alpha);
    let g = E::from_f64(gamma);
    let mut out = Tensor::zeros(x.shape());
    let od = out.data_mut();
    for i in 0..x.numel() {
        let w = weights.data()[i];
        if w == E::ZERO {
            continue;
        }
        let xv = x.data()[i];
        let p = xv.sigmoid();
        let d = if targets.data()[i] > E::from_f64(0.5) {
            // alpha * (1-p)^g * (g * p * ln p - (1-p)),  ln p = -softplus(-x)
            a * (-(g * xv.softplus())).exp() * (-(g * p * (-xv).softplus()) - (E::ONE - p))
        } else {
            // (1-alpha) * p^g * (p + g * (1-p) * softplus(x))
            na * (-(g * (-xv).softplus())).exp() * (p + g * (E::ONE - p) * xv.softplus())
        };
        od[i] = w * d * dy.data()[i];
    }
    out
}

/// Per-element smooth-L1 on (x - target):
///   |d| < beta: 0.5 d^2 / beta, else |d| - 0.5 beta; times weight.
pub fn smooth_l1_term<E: Element>(
    x: &Tensor<E>,
    targets: &Tensor<E>,
    weights: &Tensor<E>,
    beta: f64,
) -> Tensor<E> {
    let b = E::from_f64(beta);
    let half = E::from_f64(0.5);
    let mut out = Tensor::zeros(x.shape());
    let od = out.data_mut();
    for i in 0..x.numel() {
        let w = weights.data()[i];
        if w == E::ZERO {
            continue;
        }
        let d = x.data()[i] - targets.data()[i];
        let ad = d.abs();
        od[i] = w * if ad < b { half * d * d / b } else { ad - half * b };
    }
    out
}

pub fn smooth_l1_term_vjp<E: Element>(
    x: &Tensor<E>,
    targets: &Tensor<E>,
    weights: &Tensor<E>,
    beta: f64,
    dy: &Tensor<E>,
) -> Tensor<E> {
    let b = E::from_f64(beta);
    let mut out = Tensor::zeros(x.shape());
    let od = out.data_mut();
    for i in 0..x.numel() {
        let w = weights.data()[i];
        if w == E::ZERO {
            continue;
        }
        let d = x.data()[i] - targets.data()[i];
        let grad = if d.abs() < b {
            d / b
        } else if d > E::ZERO {
            E::ONE
        } else {
            -E::ONE
        };
        od[i] = w * grad * dy.data()[i];
    }
    out
}
