//! Structural kernels: channel/batch concatenation, channel slicing, and
//! column gathering (extracting per-pixel feature vectors or per-anchor
//! channel groups).

use crate::num::Element;
use crate::tensor::Tensor;

pub fn concat_channels<E: Element>(parts: &[&Tensor<E>]) -> Tensor<E> {
    let [n, _, h, w] = parts[0].shape();
    let c_total: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut out = Tensor::zeros([n, c_total, h, w]);
    let plane = h * w;
    let od = out.data_mut();
    for ni in 0..n {
        let mut c_off = 0;
        for p in parts {
            let pc = p.shape()[1];
            let src = &p.data()[ni * pc * plane..(ni + 1) * pc * plane];
            let dst_start = (ni * c_total + c_off) * plane;
            od[dst_start..dst_start + pc * plane].copy_from_slice(src);
            c_off += pc;
        }
    }
    out
}

/// Splits a channel-concat cotangent back into per-part cotangents.
pub fn concat_channels_vjp<E: Element>(dy: &Tensor<E>, part_channels: &[usize]) -> Vec<Tensor<E>> {
    let [n, c_total, h, w] = dy.shape();
    let plane = h * w;
    let mut outs: Vec<Tensor<E>> =
        part_channels.iter().map(|&pc| Tensor::zeros([n, pc, h, w])).collect();
    for ni in 0..n {
        let mut c_off = 0;
        for (pi, &pc) in part_channels.iter().enumerate() {
            let src_start = (ni * c_total + c_off) * plane;
            let dst = &mut outs[pi].data_mut()[ni * pc * plane..(ni + 1) * pc * plane];
            dst.copy_from_slice(&dy.data()[src_start..src_start + pc * plane]);
            c_off += pc;
        }
    }
    outs
}

pub fn slice_channels<E: Element>(x: &Tensor<E>, start: usize, len: usize) -> Tensor<E> {
    let [n, c, h, w] = x.shape();
    debug_assert!(start + len <= c);
    let plane = h * w;
    let mut out = Tensor::zeros([n, len, h, w]);
    let od = out.data_mut();
    for ni in 0..n {
        let src_start = (ni * c + start) * plane;
        od[ni * len * plane..(ni + 1) * len * plane]
            .copy_from_slice(&x.data()[src_start..src_start + len * plane]);
    }
    out
}

pub fn slice_channels_vjp<E: Element>(dy: &Tensor<E>, x_shape: [usize; 4], start: usize) -> Tensor<E> {
    let [n, len, h, w] = dy.shape();
    let c = x_shape[1];
    let plane = h * w;
    let mut dx = Tensor::zeros(x_shape);
    let dd = dx.data_mut();
    for ni in 0..n {
        let dst_start = (ni * c + start) * plane;
        dd[dst_start..dst_start + len * plane]
            .copy_from_slice(&dy.data()[ni * len * plane..(ni + 1) * len * plane]);
    }
    dx
}

pub fn concat_batch<E: Element>(parts: &[&Tensor<E>]) -> Tensor<E> {
    let [_, c, h, w] = parts[0].shape();
    let n_total: usize = parts.iter().map(|p| p.shape()[0]).sum();
    let mut out = Tensor::zeros([n_total, c, h, w]);
    let mut off = 0;
    let od = out.data_mut();
    for p in parts {
        od[off..off + p.numel()].copy_from_slice(p.data());
        off += p.numel();
    }
    out
}

pub fn concat_batch_vjp<E: Element>(dy: &Tensor<E>, part_batches: &[usize]) -> Vec<Tensor<E>> {
    let [_, c, h, w] = dy.shape();
    let mut outs = Vec::with_capacity(part_batches.len());
    let mut off = 0;
    for &pn in part_batches {
        let numel = pn * c * h * w;
        let mut t = Tensor::zeros([pn, c, h, w]);
        t.data_mut().copy_from_slice(&dy.data()[off..off + numel]);
        off += numel;
        outs.push(t);
    }
    outs
}

/// One gathered column: channels [c0, c0+c_len) at spatial (y, x) of batch n.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColRef {
    pub n: usize,
    pub c0: usize,
    pub c_len: usize,
    pub y: usize,
    pub x: usize,
}

/// Gathers M column vectors into [M, c_len, 1, 1]. All refs must share c_len.
pub fn gather_cols<E: Element>(x: &Tensor<E>, refs: &[ColRef]) -> Tensor<E> {
    let c_len = refs.first().map_or(0, |r| r.c_len);
    let mut out = Tensor::zeros([refs.len().max(1), c_len.max(1), 1, 1]);
    for (mi, r) in refs.iter().enumerate() {
        for ci in 0..r.c_len {
            *out.at_mut(mi, ci, 0, 0) = x.at(r.n, r.c0 + ci, r.y, r.x);
        }
    }
    out
}

pub fn gather_cols_vjp<E: Element>(dy: &Tensor<E>, refs: &[ColRef], x_shape: [usize; 4]) -> Tensor<E> {
    let mut dx = Tensor::zeros(x_shape);
    for (mi, r) in refs.iter().enumerate() {
        for ci in 0..r.c_len {
            *dx.at_mut(r.n, r.c0 + ci, r.y, r.x) += dy.at(mi, ci, 0, 0);
        }
    }
    dx
}
