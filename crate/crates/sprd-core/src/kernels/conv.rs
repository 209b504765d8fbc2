//! Convolution kernels: dense conv (im2col + GEMM), depthwise conv (direct
//! loops), and transposed conv expressed through the conv input-VJP so the
//! adjoint identity holds exactly.

use crate::num::Element;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvMeta {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvMeta {
    pub fn new(stride: usize, pad: usize, dilation: usize) -> Self {
        ConvMeta { stride, pad, dilation }
    }

    pub fn unit() -> Self {
        ConvMeta { stride: 1, pad: 0, dilation: 1 }
    }
}

/// floor((H + 2p - d(k-1) - 1) / s) + 1, or None when the padded input is
/// smaller than the effective kernel extent.
pub fn conv_out_dim(h: usize, k: usize, m: &ConvMeta) -> Option<usize> {
    let eff = m.dilation * (k - 1) + 1;
    let padded = h + 2 * m.pad;
    if padded < eff {
        return None;
    }
    Some((padded - eff) / m.stride + 1)
}

/// (H - 1)s - 2p + k, or None when non-positive.
pub fn convt_out_dim(h: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let v = (h - 1) * stride + k;
    if v <= 2 * pad {
        return None;
    }
    Some(v - 2 * pad)
}

fn im2col<E: Element>(
    x: &Tensor<E>,
    n: usize,
    k: usize,
    m: &ConvMeta,
    ho: usize,
    wo: usize,
    cols: &mut [E],
) {
    let [_, c_in, h, w] = x.shape();
    let l = ho * wo;
    debug_assert_eq!(cols.len(), c_in * k * k * l);
    let xd = x.data();
    let base = n * c_in * h * w;
    for c in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((c * k + ki) * k + kj) * l;
                for oh in 0..ho {
                    let ih = (oh * m.stride + ki * m.dilation) as isize - m.pad as isize;
                    let out_row = row + oh * wo;
                    if ih < 0 || ih as usize >= h {
                        cols[out_row..out_row + wo].fill(E::ZERO);
                        continue;
                    }
                    let src_row = base + (c * h + ih as usize) * w;
                    for ow in 0..wo {
                        let iw = (ow * m.stride + kj * m.dilation) as isize - m.pad as isize;
                        cols[out_row + ow] = if iw < 0 || iw as usize >= w {
                            E::ZERO
                        } else {
                            xd[src_row + iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<E: Element>(
    cols: &[E],
    n: usize,
    k: usize,
    m: &ConvMeta,
    ho: usize,
    wo: usize,
    dx: &mut Tensor<E>,
) {
    let [_, c_in, h, w] = dx.shape();
    let l = ho * wo;
    let base = n * c_in * h * w;
    let dxd = dx.data_mut();
    for c in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((c * k + ki) * k + kj) * l;
                for oh in 0..ho {
                    let ih = (oh * m.stride + ki * m.dilation) as isize - m.pad as isize;
                    if ih < 0 || ih as usize >= h {
                        continue;
                    }
                    let dst_row = base + (c * h + ih as usize) * w;
                    for ow in 0..wo {
                        let iw = (ow * m.stride + kj * m.dilation) as isize - m.pad as isize;
                        if iw < 0 || iw as usize >= w {
                            continue;
                        }
                        dxd[dst_row + iw as usize] += cols[row + oh * wo + ow];
                    }
                }
            }
        }
    }
}

fn is_pointwise(k: usize, m: &ConvMeta) -> bool {
    k == 1 && m.stride == 1 && m.pad == 0
}

/// Dense convolution. x: [N, C_in, H, W], w: [C_out, C_in, k, k],
/// b: [C_out, 1, 1, 1].
pub fn conv2d_fwd<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: Option<&Tensor<E>>,
    m: &ConvMeta,
) -> Tensor<E> {
    let [n, c_in, h, wd] = x.shape();
    let [c_out, wc_in, k, _] = w.shape();
    assert_eq!(c_in, wc_in, "conv2d channel mismatch");
    let ho = conv_out_dim(h, k, m).expect("conv2d output height");
    let wo = conv_out_dim(wd, k, m).expect("conv2d output width");
    let l = ho * wo;
    let kk = c_in * k * k;
    let mut out = Tensor::zeros([n, c_out, ho, wo]);
    let pointwise = is_pointwise(k, m);
    let mut cols = if pointwise { Vec::new() } else { vec![E::ZERO; kk * l] };
    for ni in 0..n {
        if pointwise {
            let xs = &x.data()[ni * c_in * l..(ni + 1) * c_in * l];
            let os = &mut out.data_mut()[ni * c_out * l..(ni + 1) * c_out * l];
            E::gemm(c_out, kk, l, w.data(), xs, E::ZERO, os);
        } else {
            im2col(x, ni, k, m, ho, wo, &mut cols);
            let os = &mut out.data_mut()[ni * c_out * l..(ni + 1) * c_out * l];
            E::gemm(c_out, kk, l, w.data(), &cols, E::ZERO, os);
        }
    }
    if let Some(b) = b {
        assert_eq!(b.shape()[0], c_out, "conv2d bias length");
        let od = out.data_mut();
        for ni in 0..n {
            for c in 0..c_out {
                let bv = b.data()[c];
                let s = (ni * c_out + c) * l;
                for v in &mut od[s..s + l] {
                    *v += bv;
                }
            }
        }
    }
    out
}

/// Gradient of a conv2d w.r.t. its input. Also the forward pass of the
/// transposed convolution (same routine, so the adjoint identity is exact).
pub fn conv2d_input_vjp<E: Element>(
    w: &Tensor<E>,
    dy: &Tensor<E>,
    x_shape: [usize; 4],
    m: &ConvMeta,
) -> Tensor<E> {
    let [n, c_out, ho, wo] = dy.shape();
    let [wc_out, c_in, k, _] = w.shape();
    assert_eq!(c_out, wc_out, "conv2d vjp channel mismatch");
    assert_eq!(x_shape[1], c_in);
    let l = ho * wo;
    let kk = c_in * k * k;
    let mut dx = Tensor::zeros(x_shape);
    let pointwise = is_pointwise(k, m) && x_shape[2] == ho && x_shape[3] == wo;
    let mut dcols = vec![E::ZERO; kk * l];
    for ni in 0..n {
        let dys = &dy.data()[ni * c_out * l..(ni + 1) * c_out * l];
        // dcols = W^T (K x C_out) * dy (C_out x L)
        gemm_at_b(c_out, kk, l, w.data(), dys, &mut dcols);
        if pointwise {
            let dxs = &mut dx.data_mut()[ni * c_in * l..(ni + 1) * c_in * l];
            for (d, s) in dxs.iter_mut().zip(dcols.iter()) {
                *d += *s;
            }
        } else {
            col2im_add(&dcols, ni, k, m, ho, wo, &mut dx);
        }
    }
    dx
}

/// C (k_dim x n_dim) = A^T * B where A is (m_dim x k_dim) row-major.
fn gemm_at_b<E: Element>(m_dim: usize, k_dim: usize, n_dim: usize, a: &[E], b: &[E], c: &mut [E]) {
    // Express A^T via strides: element (i, j) of A^T is a[j * k_dim + i].
    assert_eq!(a.len(), m_dim * k_dim);
    assert_eq!(b.len(), m_dim * n_dim);
    assert_eq!(c.len(), k_dim * n_dim);
    if m_dim == 0 || k_dim == 0 || n_dim == 0 {
        c.fill(E::ZERO);
        return;
    }
    E::gemm_strided(
        k_dim, m_dim, n_dim, a, 1, k_dim as isize, b, n_dim as isize, 1, E::ZERO, c, n_dim as isize, 1,
    );
}

/// Gradient of a conv2d w.r.t. its weight.
pub fn conv2d_weight_vjp<E: Element>(
    x: &Tensor<E>,
    dy: &Tensor<E>,
    w_shape: [usize; 4],
    m: &ConvMeta,
) -> Tensor<E> {
    let [n, c_in, h, wd] = x.shape();
    let [_, c_out, ho, wo] = dy.shape();
    let [wc_out, wc_in, k, _] = w_shape;
    assert_eq!(c_out, wc_out);
    assert_eq!(c_in, wc_in);
    let l = ho * wo;
    let kk = c_in * k * k;
    let mut dw = Tensor::zeros(w_shape);
    let pointwise = is_pointwise(k, m) && h == ho && wd == wo;
    let mut cols = if pointwise { Vec::new() } else { vec![E::ZERO; kk * l] };
    for ni in 0..n {
        let dys = &dy.data()[ni * c_out * l..(ni + 1) * c_out * l];
        let src: &[E] = if pointwise {
            &x.data()[ni * c_in * l..(ni + 1) * c_in * l]
        } else {
            im2col(x, ni, k, m, ho, wo, &mut cols);
            &cols
        };
        // dW (C_out x K) += dy (C_out x L) * cols^T (L x K)
        E::gemm_strided(
            c_out,
            l,
            kk,
            dys,
            l as isize,
            1,
            src,
            1,
            l as isize,
            E::ONE,
            dw.data_mut(),
            kk as isize,
            1,
        );
    }
    dw
}

/// Gradient of a conv w.r.t. its bias: per-channel sum of the cotangent.
pub fn bias_vjp<E: Element>(dy: &Tensor<E>, channel_axis_len: usize) -> Tensor<E> {
    let [n, c, h, w] = dy.shape();
    assert_eq!(c, channel_axis_len);
    let mut db = Tensor::zeros([c, 1, 1, 1]);
    let l = h * w;
    for ni in 0..n {
        for ci in 0..c {
            let s = (ni * c + ci) * l;
            let mut acc = E::ZERO;
            for v in &dy.data()[s..s + l] {
                acc += *v;
            }
            db.data_mut()[ci] += acc;
        }
    }
    db
}

/// Transposed convolution forward. x: [N, A, H, W], w: [A, B, k, k] (axis 0 is
/// this op's input channels), b: [B, 1, 1, 1].
pub fn convt2d_fwd<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: Option<&Tensor<E>>,
    stride: usize,
    pad: usize,
) -> Tensor<E> {
    let [n, a, h, wd] = x.shape();
    let [wa, bc, k, _] = w.shape();
    assert_eq!(a, wa, "convt2d channel mismatch");
    let ho = convt_out_dim(h, k, stride, pad).expect("convt2d output height");
    let wo = convt_out_dim(wd, k, stride, pad).expect("convt2d output width");
    let m = ConvMeta { stride, pad, dilation: 1 };
    let mut out = conv2d_input_vjp(w, x, [n, bc, ho, wo], &m);
    if let Some(b) = b {
        assert_eq!(b.shape()[0], bc, "convt2d bias length");
        let l = ho * wo;
        let od = out.data_mut();
        for ni in 0..n {
            for c in 0..bc {
                let bv = b.data()[c];
                let s = (ni * bc + c) * l;
                for v in &mut od[s..s + l] {
                    *v += bv;
                }
            }
        }
    }
    out
}

/// Gradient of convt2d w.r.t. its input: a plain conv with the same weight.
pub fn convt2d_input_vjp<E: Element>(
    w: &Tensor<E>,
    dy: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> Tensor<E> {
    conv2d_fwd(dy, w, None, &ConvMeta { stride, pad, dilation: 1 })
}

/// Gradient of convt2d w.r.t. its weight.
pub fn convt2d_weight_vjp<E: Element>(
    x: &Tensor<E>,
    dy: &Tensor<E>,
    w_shape: [usize; 4],
    stride: usize,
    pad: usize,
) -> Tensor<E> {
    // The trilinear form behind conv ties (input, weight, output) symmetrically:
    // for y = conv_input_vjp(w, x), dW = conv_weight_vjp(input=dy, cotangent=x).
    conv2d_weight_vjp(dy, x, w_shape, &ConvMeta { stride, pad, dilation: 1 })
}

/// Depthwise convolution. x: [N, C, H, W], w: [C, 1, k, k], b: [C, 1, 1, 1].
pub fn depthwise_fwd<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: Option<&Tensor<E>>,
    m: &ConvMeta,
) -> Tensor<E> {
    let [n, c, h, wd] = x.shape();
    let [wc, one, k, _] = w.shape();
    assert_eq!(c, wc, "depthwise channel mismatch");
    assert_eq!(one, 1, "depthwise multiplicity");
    let ho = conv_out_dim(h, k, m).expect("depthwise output height");
    let wo = conv_out_dim(wd, k, m).expect("depthwise output width");
    let mut out = Tensor::zeros([n, c, ho, wo]);
    for ni in 0..n {
        for ci in 0..c {
            let bv = b.map_or(E::ZERO, |b| b.data()[ci]);
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = bv;
                    for ki in 0..k {
                        let ih = (oh * m.stride + ki * m.dilation) as isize - m.pad as isize;
                        if ih < 0 || ih as usize >= h {
                            continue;
                        }
                        for kj in 0..k {
                            let iw = (ow * m.stride + kj * m.dilation) as isize - m.pad as isize;
                            if iw < 0 || iw as usize >= wd {
                                continue;
                            }
                            acc += w.at(ci, 0, ki, kj) * x.at(ni, ci, ih as usize, iw as usize);
                        }
                    }
                    *out.at_mut(ni, ci, oh, ow) = acc;
                }
            }
        }
    }
    out
}

pub fn depthwise_input_vjp<E: Element>(
    w: &Tensor<E>,
    dy: &Tensor<E>,
    x_shape: [usize; 4],
    m: &ConvMeta,
) -> Tensor<E> {
    let [n, c, ho, wo] = dy.shape();
    let [_, _, k, _] = w.shape();
    let (h, wd) = (x_shape[2], x_shape[3]);
    let mut dx = Tensor::zeros(x_shape);
    for ni in 0..n {
        for ci in 0..c {
            for oh in 0..ho {
                for ow in 0..wo {
                    let g = dy.at(ni, ci, oh, ow);
                    for ki in 0..k {
                        let ih = (oh * m.stride + ki * m.dilation) as isize - m.pad as isize;
                        if ih < 0 || ih as usize >= h {
                            continue;
                        }
                        for kj in 0..k {
                            let iw = (ow * m.stride + kj * m.dilation) as isize - m.pad as isize;
                            if iw < 0 || iw as usize >= wd {
                                continue;
                            }
                            *dx.at_mut(ni, ci, ih as usize, iw as usize) += w.at(ci, 0, ki, kj) * g;
                        }
                    }
                }
            }
        }
    }
    dx
}

pub fn depthwise_weight_vjp<E: Element>(
    x: &Tensor<E>,
    dy: &Tensor<E>,
    w_shape: [usize; 4],
    m: &ConvMeta,
) -> Tensor<E> {
    let [n, c, ho, wo] = dy.shape();
    let [_, _, k, _] = w_shape;
    let [_, _, h, wd] = x.shape();
    let mut dw = Tensor::zeros(w_shape);
    for ni in 0..n {
        for ci in 0..c {
            for oh in 0..ho {
                for ow in 0..wo {
                    let g = dy.at(ni, ci, oh, ow);
                    for ki in 0..k {
                        let ih = (oh * m.stride + ki * m.dilation) as isize - m.pad as isize;
                        if ih < 0 || ih as usize >= h {
                            continue;
                        }
                        for kj in 0..k {
                            let iw = (ow * m.stride + kj * m.dilation) as isize - m.pad as isize;
                            if iw < 0 || iw as usize >= wd {
                                continue;
                            }
                            *dw.at_mut(ci, 0, ki, kj) += x.at(ni, ci, ih as usize, iw as usize) * g;
                        }
                    }
                }
            }
        }
    }
    dw
}
