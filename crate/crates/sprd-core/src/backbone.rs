//! Bottom-up convolutional stages and the gated top-down feature pyramid.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SprError};
use crate::model::{conv_block, Binding};
use crate::num::Element;
use crate::optim::{he_normal, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::ConvMeta;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Output width of each stage.
    pub widths: Vec<usize>,
    /// Cumulative stride of each stage relative to the input image.
    pub strides: Vec<usize>,
    /// Channel width of every pyramid level.
    pub pyramid_width: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            widths: vec![32, 64, 128],
            strides: vec![4, 8, 16],
            pyramid_width: 64,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != self.strides.len() {
            return Err(SprError::Config(format!(
                "backbone has {} widths for {} strides",
                self.widths.len(),
                self.strides.len()
            )));
        }
        if self.widths.len() < 2 {
            return Err(SprError::Config("backbone needs at least 2 stages".into()));
        }
        if self.widths.iter().any(|&w| w == 0) || self.pyramid_width == 0 {
            return Err(SprError::Config("backbone widths must be positive".into()));
        }
        let mut prev = 1usize;
        for &s in &self.strides {
            if s <= prev || !s.is_power_of_two() {
                return Err(SprError::Config(format!(
                    "strides must be strictly increasing powers of two, got {:?}",
                    self.strides
                )));
            }
            prev = s;
        }
        self.stage_conv_strides()?;
        Ok(())
    }

    /// Per-stage (first, second) conv strides realizing the cumulative strides.
    pub fn stage_conv_strides(&self) -> Result<Vec<[usize; 2]>> {
        let mut out = Vec::with_capacity(self.strides.len());
        let mut prev = 1usize;
        for &s in &self.strides {
            let ratio = s / prev;
            out.push(match ratio {
                2 => [2, 1],
                4 => [2, 2],
                _ => {
                    return Err(SprError::Config(format!(
                        "stage stride ratio {ratio} unsupported (want 2 or 4)"
                    )))
                }
            });
            prev = s;
        }
        Ok(out)
    }

    pub fn max_stride(&self) -> usize {
        self.strides.last().copied().unwrap_or(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PyramidMode {
    Gfpn,
    Fpn,
}

impl std::str::FromStr for PyramidMode {
    type Err = SprError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gfpn" => Ok(PyramidMode::Gfpn),
            "fpn" => Ok(PyramidMode::Fpn),
            other => Err(SprError::Config(format!("unknown pyramid mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for PyramidMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PyramidMode::Gfpn => "gfpn",
            PyramidMode::Fpn => "fpn",
        })
    }
}

/// Registers backbone stage parameters.
pub fn init_backbone<E: Element>(
    store: &mut ParamStore<E>,
    cfg: &BackboneConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut in_ch = 3usize;
    for (i, &w) in cfg.widths.iter().enumerate() {
        for (j, ch_in) in [in_ch, w].into_iter().enumerate() {
            store.insert(&format!("backbone.stage{i}.conv{j}.w"), he_normal([w, ch_in, 3, 3], rng))?;
            store.insert(&format!("backbone.stage{i}.conv{j}.b"), Tensor::zeros([w, 1, 1, 1]))?;
        }
        in_ch = w;
    }
    Ok(())
}

/// Registers lateral projections, per-junction gates (gfpn only), and
/// post-fusion smoothing convs.
pub fn init_pyramid<E: Element>(
    store: &mut ParamStore<E>,
    cfg: &BackboneConfig,
    mode: PyramidMode,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let p = cfg.pyramid_width;
    for (i, &w) in cfg.widths.iter().enumerate() {
        store.insert(&format!("pyramid.lateral{i}.w"), he_normal([p, w, 1, 1], rng))?;
        store.insert(&format!("pyramid.lateral{i}.b"), Tensor::zeros([p, 1, 1, 1]))?;
        store.insert(&format!("pyramid.smooth{i}.w"), he_normal([p, p, 3, 3], rng))?;
        store.insert(&format!("pyramid.smooth{i}.b"), Tensor::zeros([p, 1, 1, 1]))?;
    }
    if mode == PyramidMode::Gfpn {
        for j in 0..cfg.widths.len() - 1 {
            store.insert(&format!("pyramid.gate{j}.dw.w"), Tensor::zeros([p, 1, 3, 3]))?;
            store.insert(&format!("pyramid.gate{j}.dw.b"), Tensor::zeros([p, 1, 1, 1]))?;
            store.insert(&format!("pyramid.gate{j}.pw.w"), Tensor::zeros([p, p, 1, 1]))?;
            store.insert(&format!("pyramid.gate{j}.pw.b"), Tensor::zeros([p, 1, 1, 1]))?;
        }
    }
    Ok(())
}

/// Weight count of one junction's gate: depthwise 3x3 plus pointwise 1x1
/// (biases excluded).
pub fn gate_param_count(p: usize) -> usize {
    p * 9 + p * p
}

/// Runs the bottom-up stages. Each stage is two 3x3 convs with relu.
pub fn backbone_forward<E: Element>(
    tape: &mut Tape<E>,
    bind: &Binding,
    cfg: &BackboneConfig,
    image: Var,
) -> Result<Vec<Var>> {
    let shape = tape.shape(image);
    let m = cfg.max_stride();
    if shape[2] % m != 0 || shape[3] % m != 0 {
        return Err(SprError::bad_arg(
            "backbone_forward",
            format!("input {}x{} must be a multiple of {m}", shape[2], shape[3]),
        ));
    }
    let mut x = image;
    let mut stages = Vec::with_capacity(cfg.widths.len());
    for (i, strides) in cfg.stage_conv_strides()?.into_iter().enumerate() {
        for (j, s) in strides.into_iter().enumerate() {
            x = conv_block(tape, bind, &format!("backbone.stage{i}.conv{j}"), x, ConvMeta::new(s, 1, 1), true)?;
        }
        stages.push(x);
    }
    Ok(stages)
}

/// 1x1 projection of a stage feature to pyramid width.
pub fn lateral_project<E: Element>(
    tape: &mut Tape<E>,
    bind: &Binding,
    stage_index: usize,
    stage: Var,
) -> Result<Var> {
    conv_block(tape, bind, &format!("pyramid.lateral{stage_index}"), stage, ConvMeta::unit(), false)
}

/// Combines two gate score maps with their features: a*sa + b*sb.
pub fn gate_apply<E: Element>(tape: &mut Tape<E>, a: Var, b: Var, sa: Var, sb: Var) -> Result<Var> {
    let ga = tape.mul(a, sa)?;
    let gb = tape.mul(b, sb)?;
    tape.add(ga, gb)
}

/// Fuses an upsampled upper level with a lateral. In gfpn mode one shared
/// separable conv scores both inputs through a sigmoid; fpn mode is plain
/// summation. With `hard_block` the score path propagates no gradient into
/// the features.
pub fn gate_fuse<E: Element>(
    tape: &mut Tape<E>,
    bind: &Binding,
    junction: usize,
    upper_up: Var,
    lateral: Var,
    mode: PyramidMode,
    hard_block: bool,
) -> Result<Var> {
    if tape.shape(upper_up) != tape.shape(lateral) {
        return Err(SprError::ShapeMismatch {
            op: "gate_fuse",
            left: tape.shape(upper_up),
            right: tape.shape(lateral),
        });
    }
    match mode {
        PyramidMode::Fpn => tape.add(upper_up, lateral),
        PyramidMode::Gfpn => {
            let dw_w = bind.var(&format!("pyramid.gate{junction}.dw.w"));
            let dw_b = bind.var(&format!("pyramid.gate{junction}.dw.b"));
            let pw_w = bind.var(&format!("pyramid.gate{junction}.pw.w"));
            let pw_b = bind.var(&format!("pyramid.gate{junction}.pw.b"));
            let (score_in_a, score_in_b) = if hard_block {
                (tape.detach(upper_up), tape.detach(lateral))
            } else {
                (upper_up, lateral)
            };
            let score = |t: &mut Tape<E>, x: Var| -> Result<Var> {
                let pre = t.separable_conv2d(x, dw_w, Some(dw_b), pw_w, Some(pw_b), ConvMeta::new(1, 1, 1))?;
                Ok(t.sigmoid(pre))
            };
            let sa = score(tape, score_in_a)?;
            let sb = score(tape, score_in_b)?;
            gate_apply(tape, upper_up, lateral, sa, sb)
        }
    }
}

/// Builds the feature pyramid: lateral the deepest stage, then walk down,
/// fusing each nearest-2x-upsampled upper level with the stage lateral and
/// smoothing every level with a 3x3 conv.
pub fn build_pyramid<E: Element>(
    tape: &mut Tape<E>,
    bind: &Binding,
    cfg: &BackboneConfig,
    mode: PyramidMode,
    hard_block: bool,
    stages: &[Var],
) -> Result<Vec<Var>> {
    if stages.len() < 2 {
        return Err(SprError::bad_arg("build_pyramid", "needs at least 2 stages"));
    }
    if stages.len() != cfg.widths.len() {
        return Err(SprError::bad_arg(
            "build_pyramid",
            format!("{} stages for a {}-stage config", stages.len(), cfg.widths.len()),
        ));
    }
    let top = stages.len() - 1;
    let mut levels = Vec::with_capacity(stages.len());
    levels.push(lateral_project(tape, bind, top, stages[top])?);
    for i in (0..top).rev() {
        let up = tape.upsample_nearest(*levels.last().unwrap(), 2)?;
        let lat = lateral_project(tape, bind, i, stages[i])?;
        levels.push(gate_fuse(tape, bind, i, up, lat, mode, hard_block)?);
    }
    levels.reverse();
    for (i, level) in levels.iter_mut().enumerate() {
        *level = conv_block(tape, bind, &format!("pyramid.smooth{i}"), *level, ConvMeta::new(1, 1, 1), false)?;
    }
    Ok(levels)
}
