//! Per-pixel morphology encoding and single-pixel mask reconstruction:
//! multi-scale fusion convs, pixel-column sampling, and the transposed-conv
//! decoder that grows one feature column into a 32x32 class-mask grid.

use std::sync::atomic::{AtomicU64, Ordering};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assign::MASK_SIZE;
use crate::error::{Result, SprError};
use crate::model::{conv_block, Binding};
use crate::num::Element;
use crate::optim::{he_normal, normal, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::{ColRef, ConvMeta};

/// Counts decoded pixel columns, for auditing the bounded-work guarantee.
static DECODER_INVOCATIONS: AtomicU64 = AtomicU64::new(0);

pub fn decoder_invocations() -> u64 {
    DECODER_INVOCATIONS.load(Ordering::Relaxed)
}

pub fn reset_decoder_invocations() {
    DECODER_INVOCATIONS.store(0, Ordering::Relaxed);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionMode {
    /// One 1x1 branch plus three 3x3 branches at dilations [2,4,6], concatenated.
    Dilated,
    /// Four chained 3x3 convs ending at the fused width.
    Consecutive,
    /// Four parallel 3x3 branches at dilations [1,2,4,6], concatenated.
    Parallel1246,
}

impl std::str::FromStr for FusionMode {
    type Err = SprError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dilated" => Ok(FusionMode::Dilated),
            "consecutive" => Ok(FusionMode::Consecutive),
            "parallel1246" => Ok(FusionMode::Parallel1246),
            other => Err(SprError::Config(format!("unknown fusion mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionMode::Dilated => "dilated",
            FusionMode::Consecutive => "consecutive",
            FusionMode::Parallel1246 => "parallel1246",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionConfig {
    pub mode: FusionMode,
    /// Width of the 1x1 branch.
    pub point_width: usize,
    /// Width of each dilated 3x3 branch.
    pub dilated_width: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { mode: FusionMode::Dilated, point_width: 64, dilated_width: 32 }
    }
}

impl FusionConfig {
    /// Output width, identical across modes so the decoder is unaffected.
    pub fn fused_width(&self) -> usize {
        self.point_width + 3 * self.dilated_width
    }

    pub fn validate(&self) -> Result<()> {
        if self.point_width == 0 || self.dilated_width == 0 {
            return Err(SprError::Config("fusion widths must be positive".into()));
        }
        if self.mode == FusionMode::Parallel1246 && self.fused_width() % 4 != 0 {
            return Err(SprError::Config(format!(
                "fused width {} not divisible into 4 parallel branches",
                self.fused_width()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Output widths of the three stride-2 transposed convs (1->2->4->8).
    pub deconv_widths: [usize; 3],
    /// Output widths of the two upsample-conv stages (8->16->32).
    pub up_widths: [usize; 2],
    /// Nearest-x4 shortcut from the 8x8 feature into the final classifier input.
    pub shortcut: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { deconv_widths: [256, 128, 64], up_widths: [32, 16], shortcut: true }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.deconv_widths.iter().chain(&self.up_widths).any(|&w| w == 0) {
            return Err(SprError::Config("decoder widths must be positive".into()));
        }
        Ok(())
    }
}

/// One sampled location on the pyramid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRef {
    pub level: usize,
    /// Batch index.
    pub n: usize,
    pub y: usize,
    pub x: usize,
}

pub fn init_fusion<E: Element>(
    store: &mut ParamStore<E>,
    cfg: &FusionConfig,
    p: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    let fused = cfg.fused_width();
    match cfg.mode {
        FusionMode::Dilated => {
            store.insert("mask.fuse.b0.w", he_normal([cfg.point_width, p, 1, 1], rng))?;
            store.insert("mask.fuse.b0.b", Tensor::zeros([cfg.point_width, 1, 1, 1]))?;
            for (i, _) in [2usize, 4, 6].iter().enumerate() {
                store.insert(&format!("mask.fuse.b{}.w", i + 1), he_normal([cfg.dilated_width, p, 3, 3], rng))?;
                store.insert(&format!("mask.fuse.b{}.b", i + 1), Tensor::zeros([cfg.dilated_width, 1, 1, 1]))?;
            }
        }
        FusionMode::Consecutive => {
            let widths = [p, p, p, fused];
            let mut in_ch = p;
            for (i, &w) in widths.iter().enumerate() {
                store.insert(&format!("mask.fuse.c{i}.w"), he_normal([w, in_ch, 3, 3], rng))?;
                store.insert(&format!("mask.fuse.c{i}.b"), Tensor::zeros([w, 1, 1, 1]))?;
                in_ch = w;
            }
        }
        FusionMode::Parallel1246 => {
            let w = fused / 4;
            for i in 0..4 {
                store.insert(&format!("mask.fuse.p{i}.w"), he_normal([w, p, 3, 3], rng))?;
                store.insert(&format!("mask.fuse.p{i}.b"), Tensor::zeros([w, 1, 1, 1]))?;
            }
        }
    }
    Ok(())
}

pub fn init_decoder<E: Element>(
    store: &mut ParamStore<E>,
    cfg: &DecoderConfig,
    fused_width: usize,
    classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    let mut in_ch = fused_width;
    for (i, &w) in cfg.deconv_widths.iter().enumerate() {
        // Stride equals kernel size, so each output position receives exactly
        // in_ch contributions; scale the init accordingly.
        let std = (2.0 / in_ch as f64).sqrt();
        store.insert(&format!("mask.dec.deconv{i}.w"), normal([in_ch, w, 2, 2], std, rng))?;
        store.insert(&format!("mask.dec.deconv{i}.b"), Tensor::zeros([w, 1, 1, 1]))?;
        in_ch = w;
    }
    for (i, &w) in cfg.up_widths.iter().enumerate() {
        store.insert(&format!("mask.dec.up{i}.w"), he_normal([w, in_ch, 3, 3], rng))?;
        store.insert(&format!("mask.dec.up{i}.b"), Tensor::zeros([w, 1, 1, 1]))?;
        in_ch = w;
    }
    if cfg.shortcut {
        store.insert("mask.dec.shortcut.w", he_normal([cfg.up_widths[1], cfg.deconv_widths[2], 1, 1], rng))?;
        store.insert("mask.dec.shortcut.b", Tensor::zeros([cfg.up_widths[1], 1, 1, 1]))?;
    }
    store.insert("mask.dec.out.w", he_normal([classes, cfg.up_widths[1], 1, 1], rng))?;
    store.insert("mask.dec.out.b", Tensor::zeros([classes, 1, 1, 1]))?;
    Ok(())
}

/// Encodes morphology into every pixel of one pyramid level; spatial size is
/// preserved and the output width is `cfg.fused_width()`.
pub fn fuse_multiscale<E: Element>(
    tape: &mut Tape<E>,
    bind: &Binding,
    cfg: &FusionConfig,
    level: Var,
) -> Result<Var> {
    match cfg.mode {
        FusionMode::Dilated => {
            let mut parts = vec![conv_block(tape, bind, "mask.fuse.b0", level, ConvMeta::unit(), true)?];
            for (i, d) in [2usize, 4, 6].into_iter().enumerate() {
                let meta = ConvMeta { stride: 1, pad: d, dilation: d };
                parts.push(conv_block(tape, bind, &format!("mask.fuse.b{}", i + 1), level, meta, true)?);
            }
            tape.concat_channels(&parts)
        }
        FusionMode::Consecutive => {
            let mut x = level;
            for i in 0..4 {
                x = conv_block(tape, bind, &format!("mask.fuse.c{i}"), x, ConvMeta::new(1, 1, 1), true)?;
            }
            Ok(x)
        }
        FusionMode::Parallel1246 => {
            let mut parts = Vec::with_capacity(4);
            for (i, d) in [1usize, 2, 4, 6].into_iter().enumerate() {
                let meta = ConvMeta { stride: 1, pad: d, dilation: d };
                parts.push(conv_block(tape, bind, &format!("mask.fuse.p{i}"), level, meta, true)?);
            }
            tape.concat_channels(&parts)
        }
    }
}

/// Extracts one feature column as [1, C, 1, 1]; gradient flows back only
/// into that location.
pub fn sample_pixel_feature<E: Element>(
    tape: &mut Tape<E>,
    fused: Var,
    r: &PixelRef,
) -> Result<Var> {
    let c = tape.shape(fused)[1];
    tape.gather_cols(fused, vec![ColRef { n: r.n, c0: 0, c_len: c, y: r.y, x: r.x }])
}

/// Gathers many pixel columns across levels into one [M, C, 1, 1] batch.
/// Rows are grouped by level; the returned map gives, for each output row,
/// the index of the ref that produced it.
pub fn gather_pixel_features<E: Element>(
    tape: &mut Tape<E>,
    fused_levels: &[Var],
    refs: &[PixelRef],
) -> Result<(Var, Vec<usize>)> {
    if refs.is_empty() {
        return Err(SprError::bad_arg("gather_pixel_features", "no refs"));
    }
    let mut parts = Vec::new();
    let mut order = Vec::with_capacity(refs.len());
    for (lvl, &fused) in fused_levels.iter().enumerate() {
        let c = tape.shape(fused)[1];
        let cols: Vec<ColRef> = refs
            .iter()
            .enumerate()
            .filter(|(_, r)| r.level == lvl)
            .map(|(i, r)| {
                order.push(i);
                ColRef { n: r.n, c0: 0, c_len: c, y: r.y, x: r.x }
            })
            .collect();
        if !cols.is_empty() {
            parts.push(tape.gather_cols(fused, cols)?);
        }
    }
    if order.len() != refs.len() {
        return Err(SprError::bad_arg("gather_pixel_features", "ref level out of range"));
    }
    let batched = tape.concat_batch(&parts)?;
    Ok((batched, order))
}

/// Decoder output: per-class mask logits and the spatial trace of every stage.
#[derive(Debug, Clone)]
pub struct MaskDecode {
    /// [M, K, 32, 32].
    pub logits: Var,
    /// The 8x8 feature after the three transposed convs, before any
    /// activation or shortcut.
    pub eight: Var,
    /// Side lengths 1 -> 2 -> 4 -> 8 -> 16 -> 32.
    pub trace: Vec<usize>,
}

/// Grows a batch of pixel columns [M, C, 1, 1] into mask logits [M, K, 32, 32]:
/// three stride-2 transposed convs with no activation, two nearest-upsample +
/// conv + relu stages, an optional nearest-x4 shortcut from the 8x8 feature,
/// and a final 1x1 classifier.
pub fn reconstruct_mask<E: Element>(
    tape: &mut Tape<E>,
    bind: &Binding,
    cfg: &DecoderConfig,
    pixels: Var,
) -> Result<MaskDecode> {
    let shape = tape.shape(pixels);
    if shape[2] != 1 || shape[3] != 1 {
        return Err(SprError::bad_arg(
            "reconstruct_mask",
            format!("expected pixel columns [M, C, 1, 1], got {shape:?}"),
        ));
    }
    DECODER_INVOCATIONS.fetch_add(shape[0] as u64, Ordering::Relaxed);
    let mut trace = vec![1usize];
    let mut x = pixels;
    for i in 0..3 {
        let w = bind.var(&format!("mask.dec.deconv{i}.w"));
        let b = bind.var(&format!("mask.dec.deconv{i}.b"));
        x = tape.conv2d_transpose(x, w, Some(b), 2, 0)?;
        trace.push(tape.shape(x)[2]);
    }
    let eight = x;
    for i in 0..2 {
        x = tape.upsample_nearest(x, 2)?;
        x = conv_block(tape, bind, &format!("mask.dec.up{i}"), x, ConvMeta::new(1, 1, 1), true)?;
        trace.push(tape.shape(x)[2]);
    }
    if cfg.shortcut {
        let s = tape.upsample_nearest(eight, 4)?;
        let s = conv_block(tape, bind, "mask.dec.shortcut", s, ConvMeta::unit(), false)?;
        x = tape.add(x, s)?;
    }
    let logits = conv_block(tape, bind, "mask.dec.out", x, ConvMeta::unit(), false)?;
    let out_shape = tape.shape(logits);
    debug_assert_eq!([out_shape[2], out_shape[3]], [MASK_SIZE, MASK_SIZE]);
    Ok(MaskDecode { logits, eight, trace })
}

/// Slices one class channel from decoder logits, [M, 1, 32, 32].
pub fn select_mask_channel<E: Element>(
    tape: &mut Tape<E>,
    logits: Var,
    class_id: usize,
) -> Result<Var> {
    let k = tape.shape(logits)[1];
    if class_id >= k {
        return Err(SprError::bad_arg(
            "select_mask_channel",
            format!("class {class_id} out of range for {k} channels"),
        ));
    }
    tape.slice_channels(logits, class_id, 1)
}
