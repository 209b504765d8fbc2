//! Spatial resampling: integer nearest-neighbor upsampling and bilinear
//! resizing with half-pixel centers (align_corners = false).

use crate::num::Element;
use crate::tensor::Tensor;

pub fn upsample_nearest<E: Element>(x: &Tensor<E>, factor: usize) -> Tensor<E> {
    let [n, c, h, w] = x.shape();
    let (ho, wo) = (h * factor, w * factor);
    let mut out = Tensor::zeros([n, c, ho, wo]);
    for ni in 0..n {
        for ci in 0..c {
            for oh in 0..ho {
                let ih = oh / factor;
                for ow in 0..wo {
                    *out.at_mut(ni, ci, oh, ow) = x.at(ni, ci, ih, ow / factor);
                }
            }
        }
    }
    out
}

pub fn upsample_nearest_vjp<E: Element>(dy: &Tensor<E>, factor: usize, x_shape: [usize; 4]) -> Tensor<E> {
    let [n, c, ho, wo] = dy.shape();
    let mut dx = Tensor::zeros(x_shape);
    for ni in 0..n {
        for ci in 0..c {
            for oh in 0..ho {
                let ih = oh / factor;
                for ow in 0..wo {
                    *dx.at_mut(ni, ci, ih, ow / factor) += dy.at(ni, ci, oh, ow);
                }
            }
        }
    }
    dx
}

/// Source coordinate and lerp weights for one output index under the
/// half-pixel convention, clamped to the valid range.
#[inline]
pub fn bilinear_axis(o: usize, out_len: usize, in_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (s.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    let f = (s - i0 as f64).clamp(0.0, 1.0);
    (i0, i1, f)
}

pub fn upsample_bilinear<E: Element>(x: &Tensor<E>, out_h: usize, out_w: usize) -> Tensor<E> {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    for oh in 0..out_h {
        let (y0, y1, fy) = bilinear_axis(oh, out_h, h);
        for ow in 0..out_w {
            let (x0, x1, fx) = bilinear_axis(ow, out_w, w);
            let w00 = E::from_f64((1.0 - fy) * (1.0 - fx));
            let w01 = E::from_f64((1.0 - fy) * fx);
            let w10 = E::from_f64(fy * (1.0 - fx));
            let w11 = E::from_f64(fy * fx);
            for ni in 0..n {
                for ci in 0..c {
                    let v = w00 * x.at(ni, ci, y0, x0)
                        + w01 * x.at(ni, ci, y0, x1)
                        + w10 * x.at(ni, ci, y1, x0)
                        + w11 * x.at(ni, ci, y1, x1);
                    *out.at_mut(ni, ci, oh, ow) = v;
                }
            }
        }
    }
    out
}

pub fn upsample_bilinear_vjp<E: Element>(dy: &Tensor<E>, x_shape: [usize; 4]) -> Tensor<E> {
    let [n, c, out_h, out_w] = dy.shape();
    let (h, w) = (x_shape[2], x_shape[3]);
    let mut dx = Tensor::zeros(x_shape);
    for oh in 0..out_h {
        let (y0, y1, fy) = bilinear_axis(oh, out_h, h);
        for ow in 0..out_w {
            let (x0, x1, fx) = bilinear_axis(ow, out_w, w);
            let w00 = E::from_f64((1.0 - fy) * (1.0 - fx));
            let w01 = E::from_f64((1.0 - fy) * fx);
            let w10 = E::from_f64(fy * (1.0 - fx));
            let w11 = E::from_f64(fy * fx);
            for ni in 0..n {
                for ci in 0..c {
                    let g = dy.at(ni, ci, oh, ow);
                    *dx.at_mut(ni, ci, y0, x0) += w00 * g;
                    *dx.at_mut(ni, ci, y0, x1) += w01 * g;
                    *dx.at_mut(ni, ci, y1, x0) += w10 * g;
                    *dx.at_mut(ni, ci, y1, x1) += w11 * g;
                }
            }
        }
    }
    dx
}
