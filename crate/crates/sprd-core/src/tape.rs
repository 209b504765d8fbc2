//! Dynamic reverse-mode differentiation tape. Each builder records one node;
//! `backward` walks the recorded ops in reverse and accumulates cotangents
//! into every leaf that asked for a gradient. The tape is not consumed by
//! `backward` and may be replayed or differentiated again.

use crate::error::{Result, SprError};
use crate::kernels::conv::{self, ConvMeta};
use crate::kernels::elementwise as ew;
use crate::kernels::gather::{self, ColRef};
use crate::kernels::resize;
use crate::num::Element;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<E: Element> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, meta: ConvMeta },
    ConvT2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Depthwise { x: Var, w: Var, b: Option<Var>, meta: ConvMeta },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Sigmoid { x: Var },
    Relu { x: Var },
    MulScalar { x: Var, c: f64 },
    SumAll { x: Var },
    ConcatC { parts: Vec<Var> },
    SliceC { x: Var, start: usize },
    ConcatN { parts: Vec<Var> },
    GatherCols { x: Var, refs: Vec<ColRef> },
    UpNearest { x: Var, factor: usize },
    UpBilinear { x: Var },
    FocalTerm { x: Var, targets: Tensor<E>, weights: Tensor<E>, alpha: f64, gamma: f64 },
    SmoothL1Term { x: Var, targets: Tensor<E>, weights: Tensor<E>, beta: f64 },
    Detach { #[allow(dead_code)] x: Var },
}

pub struct Tape<E: Element> {
    vals: Vec<Tensor<E>>,
    ops: Vec<Op<E>>,
    needs: Vec<bool>,
}

/// Gradients produced by one backward pass, indexed by Var.
pub struct Grads<E: Element> {
    slots: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Grads<E> {
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<E>> {
        self.slots.get_mut(v.0).and_then(|s| s.take())
    }
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { vals: Vec::new(), ops: Vec::new(), needs: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.vals[v.0]
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.vals[v.0].shape()
    }

    pub fn scalar_value(&self, v: Var) -> E {
        self.vals[v.0].data()[0]
    }

    fn push(&mut self, val: Tensor<E>, op: Op<E>, needs: bool) -> Var {
        self.vals.push(val);
        self.ops.push(op);
        self.needs.push(needs);
        Var(self.vals.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor<E>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    fn needs(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    fn check_weight(&self, op: &'static str, w: Var) -> Result<(usize, usize, usize)> {
        let ws = self.shape(w);
        if ws[2] != ws[3] {
            return Err(SprError::bad_arg(op, format!("kernel must be square, got {:?}", ws)));
        }
        Ok((ws[0], ws[1], ws[2]))
    }

    fn check_bias(&self, op: &'static str, b: Option<Var>, len: usize) -> Result<()> {
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs != [len, 1, 1, 1] {
                return Err(SprError::ShapeMismatch { op, left: bs, right: [len, 1, 1, 1] });
            }
        }
        Ok(())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, meta: ConvMeta) -> Result<Var> {
        let xs = self.shape(x);
        let (c_out, c_in, k) = self.check_weight("conv2d", w)?;
        if xs[1] != c_in {
            return Err(SprError::ShapeMismatch { op: "conv2d", left: xs, right: self.shape(w) });
        }
        if meta.dilation < 1 || meta.stride < 1 {
            return Err(SprError::bad_arg("conv2d", "stride and dilation must be >= 1"));
        }
        self.check_bias("conv2d", b, c_out)?;
        let (ho, wo) = match (conv::conv_out_dim(xs[2], k, &meta), conv::conv_out_dim(xs[3], k, &meta)) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(SprError::bad_arg(
                    "conv2d",
                    format!(
                        "effective kernel {} exceeds padded input {:?} (k={}, meta={:?})",
                        meta.dilation * (k - 1) + 1,
                        [xs[2] + 2 * meta.pad, xs[3] + 2 * meta.pad],
                        k,
                        meta
                    ),
                ))
            }
        };
        let _ = (ho, wo);
        let out = conv::conv2d_fwd(&self.vals[x.0], &self.vals[w.0], b.map(|b| &self.vals[b.0]), &meta);
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, meta }, needs))
    }

    pub fn conv2d_transpose(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x);
        let (a, out_c, k) = self.check_weight("conv2d_transpose", w)?;
        if xs[1] != a {
            return Err(SprError::ShapeMismatch { op: "conv2d_transpose", left: xs, right: self.shape(w) });
        }
        if stride < 1 {
            return Err(SprError::bad_arg("conv2d_transpose", "stride must be >= 1"));
        }
        if pad >= k {
            return Err(SprError::bad_arg("conv2d_transpose", format!("padding {} must be < kernel {}", pad, k)));
        }
        self.check_bias("conv2d_transpose", b, out_c)?;
        if conv::convt_out_dim(xs[2], k, stride, pad).is_none()
            || conv::convt_out_dim(xs[3], k, stride, pad).is_none()
        {
            return Err(SprError::bad_arg("conv2d_transpose", "non-positive computed output size"));
        }
        let out = conv::convt2d_fwd(&self.vals[x.0], &self.vals[w.0], b.map(|b| &self.vals[b.0]), stride, pad);
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::ConvT2d { x, w, b, stride, pad }, needs))
    }

    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, meta: ConvMeta) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws[1] != 1 {
            return Err(SprError::bad_arg(
                "depthwise_conv2d",
                format!("channel multiplicity must be 1, got weight {:?}", ws),
            ));
        }
        if ws[2] != ws[3] {
            return Err(SprError::bad_arg("depthwise_conv2d", format!("kernel must be square, got {:?}", ws)));
        }
        if xs[1] != ws[0] {
            return Err(SprError::ShapeMismatch { op: "depthwise_conv2d", left: xs, right: ws });
        }
        self.check_bias("depthwise_conv2d", b, ws[0])?;
        if conv::conv_out_dim(xs[2], ws[2], &meta).is_none() || conv::conv_out_dim(xs[3], ws[2], &meta).is_none() {
            return Err(SprError::bad_arg("depthwise_conv2d", "effective kernel exceeds padded input"));
        }
        let out = conv::depthwise_fwd(&self.vals[x.0], &self.vals[w.0], b.map(|b| &self.vals[b.0]), &meta);
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::Depthwise { x, w, b, meta }, needs))
    }

    /// Depthwise conv followed by a 1x1 pointwise conv.
    pub fn separable_conv2d(
        &mut self,
        x: Var,
        dw_w: Var,
        dw_b: Option<Var>,
        pw_w: Var,
        pw_b: Option<Var>,
        meta: ConvMeta,
    ) -> Result<Var> {
        let pws = self.shape(pw_w);
        if pws[2] != 1 || pws[3] != 1 {
            return Err(SprError::bad_arg("separable_conv2d", format!("pointwise kernel must be 1x1, got {:?}", pws)));
        }
        let mid = self.depthwise_conv2d(x, dw_w, dw_b, meta)?;
        self.conv2d(mid, pw_w, pw_b, ConvMeta::unit())
    }

    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(SprError::ShapeMismatch { op, left: sa, right: sb });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("add", a, b)?;
        let out = ew::add(&self.vals[a.0], &self.vals[b.0]);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("mul", a, b)?;
        let out = ew::mul(&self.vals[a.0], &self.vals[b.0]);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul { a, b }, needs))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = ew::sigmoid(&self.vals[x.0]);
        let needs = self.needs(x);
        self.push(out, Op::Sigmoid { x }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ew::relu(&self.vals[x.0]);
        let needs = self.needs(x);
        self.push(out, Op::Relu { x }, needs)
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = ew::mul_scalar(&self.vals[x.0], c);
        let needs = self.needs(x);
        self.push(out, Op::MulScalar { x, c }, needs)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = ew::sum_all(&self.vals[x.0]);
        let needs = self.needs(x);
        self.push(out, Op::SumAll { x }, needs)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(SprError::bad_arg("concat_channels", "no parts"));
        }
        let first = self.shape(parts[0]);
        for &p in parts {
            let s = self.shape(p);
            if s[0] != first[0] || s[2] != first[2] || s[3] != first[3] {
                return Err(SprError::ShapeMismatch { op: "concat_channels", left: first, right: s });
            }
        }
        let tensors: Vec<&Tensor<E>> = parts.iter().map(|&p| &self.vals[p.0]).collect();
        let out = gather::concat_channels(&tensors);
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatC { parts: parts.to_vec() }, needs))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x);
        if start + len > xs[1] || len == 0 {
            return Err(SprError::bad_arg(
                "slice_channels",
                format!("slice [{start}, {}) out of range for {} channels", start + len, xs[1]),
            ));
        }
        let out = gather::slice_channels(&self.vals[x.0], start, len);
        let needs = self.needs(x);
        Ok(self.push(out, Op::SliceC { x, start }, needs))
    }

    pub fn concat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(SprError::bad_arg("concat_batch", "no parts"));
        }
        let first = self.shape(parts[0]);
        for &p in parts {
            let s = self.shape(p);
            if s[1] != first[1] || s[2] != first[2] || s[3] != first[3] {
                return Err(SprError::ShapeMismatch { op: "concat_batch", left: first, right: s });
            }
        }
        let tensors: Vec<&Tensor<E>> = parts.iter().map(|&p| &self.vals[p.0]).collect();
        let out = gather::concat_batch(&tensors);
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatN { parts: parts.to_vec() }, needs))
    }

    pub fn gather_cols(&mut self, x: Var, refs: Vec<ColRef>) -> Result<Var> {
        if refs.is_empty() {
            return Err(SprError::bad_arg("gather_cols", "no refs"));
        }
        let xs = self.shape(x);
        let c_len = refs[0].c_len;
        for r in &refs {
            if r.c_len != c_len {
                return Err(SprError::bad_arg("gather_cols", "refs disagree on channel length"));
            }
            if r.n >= xs[0] || r.c0 + r.c_len > xs[1] || r.y >= xs[2] || r.x >= xs[3] {
                return Err(SprError::bad_arg(
                    "gather_cols",
                    format!("ref {:?} out of bounds for shape {:?}", r, xs),
                ));
            }
        }
        let out = gather::gather_cols(&self.vals[x.0], &refs);
        let needs = self.needs(x);
        Ok(self.push(out, Op::GatherCols { x, refs }, needs))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(SprError::bad_arg("upsample_nearest", "factor must be >= 1"));
        }
        let out = resize::upsample_nearest(&self.vals[x.0], factor);
        let needs = self.needs(x);
        Ok(self.push(out, Op::UpNearest { x, factor }, needs))
    }

    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h < 1 || out_w < 1 {
            return Err(SprError::bad_arg("upsample_bilinear", "output dims must be >= 1"));
        }
        let out = resize::upsample_bilinear(&self.vals[x.0], out_h, out_w);
        let needs = self.needs(x);
        Ok(self.push(out, Op::UpBilinear { x }, needs))
    }

    pub fn focal_term(
        &mut self,
        x: Var,
        targets: Tensor<E>,
        weights: Tensor<E>,
        alpha: f64,
        gamma: f64,
    ) -> Result<Var> {
        let xs = self.shape(x);
        if targets.shape() != xs || weights.shape() != xs {
            return Err(SprError::ShapeMismatch { op: "focal_term", left: xs, right: targets.shape() });
        }
        let out = ew::focal_term(&self.vals[x.0], &targets, &weights, alpha, gamma);
        let needs = self.needs(x);
        Ok(self.push(out, Op::FocalTerm { x, targets, weights, alpha, gamma }, needs))
    }

    pub fn smooth_l1_term(&mut self, x: Var, targets: Tensor<E>, weights: Tensor<E>, beta: f64) -> Result<Var> {
        let xs = self.shape(x);
        if targets.shape() != xs || weights.shape() != xs {
            return Err(SprError::ShapeMismatch { op: "smooth_l1_term", left: xs, right: targets.shape() });
        }
        let out = ew::smooth_l1_term(&self.vals[x.0], &targets, &weights, beta);
        let needs = self.needs(x);
        Ok(self.push(out, Op::SmoothL1Term { x, targets, weights, beta }, needs))
    }

    /// Identity forward, zero backward.
    pub fn detach(&mut self, x: Var) -> Var {
        let out = self.vals[x.0].clone();
        self.push(out, Op::Detach { x }, false)
    }

    pub fn backward(&self, root: Var) -> Result<Grads<E>> {
        if self.shape(root) != [1, 1, 1, 1] {
            return Err(SprError::bad_arg(
                "backward",
                format!("root must be scalar, got {:?}", self.shape(root)),
            ));
        }
        let mut slots: Vec<Option<Tensor<E>>> = (0..self.vals.len()).map(|_| None).collect();
        slots[root.0] = Some(Tensor::scalar(E::ONE));
        for i in (0..=root.0).rev() {
            let Some(g) = slots[i].take() else { continue };
            self.apply_vjp(i, &g, &mut slots);
            slots[i] = Some(g);
        }
        Ok(Grads { slots })
    }

    fn accum(slots: &mut [Option<Tensor<E>>], v: Var, delta: Tensor<E>) {
        match &mut slots[v.0] {
            Some(t) => {
                for (o, d) in t.data_mut().iter_mut().zip(delta.data()) {
                    *o += *d;
                }
            }
            s @ None => *s = Some(delta),
        }
    }

    fn apply_vjp(&self, i: usize, g: &Tensor<E>, slots: &mut [Option<Tensor<E>>]) {
        match &self.ops[i] {
            Op::Leaf | Op::Detach { .. } => {}
            Op::Conv2d { x, w, b, meta } => {
                if self.needs(*x) {
                    let dx = conv::conv2d_input_vjp(&self.vals[w.0], g, self.shape(*x), meta);
                    Self::accum(slots, *x, dx);
                }
                if self.needs(*w) {
                    let dw = conv::conv2d_weight_vjp(&self.vals[x.0], g, self.shape(*w), meta);
                    Self::accum(slots, *w, dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        Self::accum(slots, *b, conv::bias_vjp(g, self.shape(*b)[0]));
                    }
                }
            }
            Op::ConvT2d { x, w, b, stride, pad } => {
                if self.needs(*x) {
                    let dx = conv::convt2d_input_vjp(&self.vals[w.0], g, *stride, *pad);
                    Self::accum(slots, *x, dx);
                }
                if self.needs(*w) {
                    let dw = conv::convt2d_weight_vjp(&self.vals[x.0], g, self.shape(*w), *stride, *pad);
                    Self::accum(slots, *w, dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        Self::accum(slots, *b, conv::bias_vjp(g, self.shape(*b)[0]));
                    }
                }
            }
            Op::Depthwise { x, w, b, meta } => {
                if self.needs(*x) {
                    let dx = conv::depthwise_input_vjp(&self.vals[w.0], g, self.shape(*x), meta);
                    Self::accum(slots, *x, dx);
                }
                if self.needs(*w) {
                    let dw = conv::depthwise_weight_vjp(&self.vals[x.0], g, self.shape(*w), meta);
                    Self::accum(slots, *w, dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        Self::accum(slots, *b, conv::bias_vjp(g, self.shape(*b)[0]));
                    }
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    Self::accum(slots, *a, g.clone());
                }
                if self.needs(*b) {
                    Self::accum(slots, *b, g.clone());
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    Self::accum(slots, *a, ew::mul(g, &self.vals[b.0]));
                }
                if self.needs(*b) {
                    Self::accum(slots, *b, ew::mul(g, &self.vals[a.0]));
                }
            }
            Op::Sigmoid { x } => {
                if self.needs(*x) {
                    Self::accum(slots, *x, ew::sigmoid_vjp(&self.vals[i], g));
                }
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    Self::accum(slots, *x, ew::relu_vjp(&self.vals[x.0], g));
                }
            }
            Op::MulScalar { x, c } => {
                if self.needs(*x) {
                    Self::accum(slots, *x, ew::mul_scalar(g, *c));
                }
            }
            Op::SumAll { x } => {
                if self.needs(*x) {
                    Self::accum(slots, *x, Tensor::full(self.shape(*x), g.data()[0]));
                }
            }
            Op::ConcatC { parts } => {
                let channels: Vec<usize> = parts.iter().map(|&p| self.shape(p)[1]).collect();
                let split = gather::concat_channels_vjp(g, &channels);
                for (p, d) in parts.iter().zip(split) {
                    if self.needs(*p) {
                        Self::accum(slots, *p, d);
                    }
                }
            }
            Op::SliceC { x, start } => {
                if self.needs(*x) {
                    Self::accum(slots, *x, gather::slice_channels_vjp(g, self.shape(*x), *start));
                }
            }
            Op::ConcatN { parts } => {
                let batches: Vec<usize> = parts.iter().map(|&p| self.shape(p)[0]).collect();
                let split = gather::concat_batch_vjp(g, &batches);
                for (p, d) in parts.iter().zip(split) {
                    if self.needs(*p) {
                        Self::accum(slots, *p, d);
                    }
                }
            }
            Op::GatherCols { x, refs } => {
                if self.needs(*x) {
                    Self::accum(slots, *x, gather::gather_cols_vjp(g, refs, self.shape(*x)));
                }
            }
            Op::UpNearest { x, factor } => {
                if self.needs(*x) {
                    Self::accum(slots, *x, resize::upsample_nearest_vjp(g, *factor, self.shape(*x)));
                }
            }
            Op::UpBilinear { x } => {
                if self.needs(*x) {
                    Self::accum(slots, *x, resize::upsample_bilinear_vjp(g, self.shape(*x)));
                }
            }
            Op::FocalTerm { x, targets, weights, alpha, gamma } => {
                if self.needs(*x) {
                    let dx = ew::focal_term_vjp(&self.vals[x.0], targets, weights, *alpha, *gamma, g);
                    Self::accum(slots, *x, dx);
                }
            }
            Op::SmoothL1Term { x, targets, weights, beta } => {
                if self.needs(*x) {
                    let dx = ew::smooth_l1_term_vjp(&self.vals[x.0], targets, weights, *beta, g);
                    Self::accum(slots, *x, dx);
                }
            }
        }
    }
}
