//! Whole-network assembly: parameter initialization, tape binding, and the
//! forward pass producing detection logits, box deltas, and fused mask
//! features for every pyramid level.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorConfig;
use crate::backbone::{
    backbone_forward, build_pyramid, init_backbone, init_pyramid, BackboneConfig, PyramidMode,
};
use crate::error::{Result, SprError};
use crate::heads::{box_head_forward, class_head_forward, init_heads, HeadConfig};
use crate::mask_branch::{fuse_multiscale, init_decoder, init_fusion, DecoderConfig, FusionConfig};
use crate::num::Element;
use crate::optim::ParamStore;
use crate::tape::{Tape, Var};
use crate::ConvMeta;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Object classes K.
    pub classes: usize,
    pub backbone: BackboneConfig,
    pub pyramid: PyramidMode,
    /// Stop gradients through the gate score path.
    pub hard_block: bool,
    pub head: HeadConfig,
    pub anchors: AnchorConfig,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            classes: 3,
            backbone: BackboneConfig::default(),
            pyramid: PyramidMode::Gfpn,
            hard_block: false,
            head: HeadConfig::default(),
            anchors: AnchorConfig::default(),
            fusion: FusionConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(SprError::Config("classes must be positive".into()));
        }
        self.backbone.validate()?;
        self.fusion.validate()?;
        self.decoder.validate()?;
        if self.anchors.base_sizes.len() != self.backbone.strides.len() {
            return Err(SprError::Config(format!(
                "{} anchor base sizes for {} pyramid levels",
                self.anchors.base_sizes.len(),
                self.backbone.strides.len()
            )));
        }
        if self.anchors.per_pixel() == 0 {
            return Err(SprError::Config("anchors per pixel must be positive".into()));
        }
        Ok(())
    }

    pub fn anchors_per_pixel(&self) -> usize {
        self.anchors.per_pixel()
    }
}

/// Creates and initializes every parameter of the network, deterministically
/// for a given seed and config.
pub fn init_params<E: Element>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<E>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let p = cfg.backbone.pyramid_width;
    init_backbone(&mut store, &cfg.backbone, &mut rng)?;
    init_pyramid(&mut store, &cfg.backbone, cfg.pyramid, &mut rng)?;
    init_heads(&mut store, &cfg.head, p, cfg.anchors_per_pixel(), cfg.classes, &mut rng)?;
    init_fusion(&mut store, &cfg.fusion, p, &mut rng)?;
    init_decoder(&mut store, &cfg.decoder, cfg.fusion.fused_width(), cfg.classes, &mut rng)?;
    Ok(store)
}

/// Maps parameter paths to tape leaves for one forward/backward pass.
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    /// Copies every parameter onto the tape. With `trainable` the leaves
    /// participate in backward and their gradients can be harvested.
    pub fn bind<E: Element>(tape: &mut Tape<E>, store: &ParamStore<E>, trainable: bool) -> Binding {
        let mut vars = BTreeMap::new();
        for (path, param) in store.iter() {
            vars.insert(path.clone(), tape.leaf(param.value.clone(), trainable));
        }
        Binding { vars }
    }

    /// Resolves a parameter path. Panics on unknown paths: these are
    /// construction bugs, not runtime conditions.
    pub fn var(&self, path: &str) -> Var {
        *self
            .vars
            .get(path)
            .unwrap_or_else(|| panic!("unbound parameter path {path:?}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Convolution + bias with an optional relu, reading weights from the binding.
pub(crate) fn conv_block<E: Element>(
    tape: &mut Tape<E>,
    bind: &Binding,
    path: &str,
    x: Var,
    meta: ConvMeta,
    relu: bool,
) -> Result<Var> {
    let w = bind.var(&format!("{path}.w"));
    let b = bind.var(&format!("{path}.b"));
    let y = tape.conv2d(x, w, Some(b), meta)?;
    Ok(if relu { tape.relu(y) } else { y })
}

/// Everything the detector produces for one batch before post-processing.
pub struct Features {
    /// Smoothed pyramid levels, low stride first, each [N, P, h, w].
    pub pyramid: Vec<Var>,
    /// Class logits per level, [N, A*K, h, w].
    pub cls: Vec<Var>,
    /// Box deltas per level, [N, A*4, h, w].
    pub boxes: Vec<Var>,
    /// Fused mask features per level, [N, fused, h, w].
    pub fused: Vec<Var>,
    /// Stride of each level.
    pub strides: Vec<usize>,
}

/// Full forward pass over all three branches on every pyramid level.
pub fn forward<E: Element>(
    tape: &mut Tape<E>,
    bind: &Binding,
    cfg: &ModelConfig,
    image: Var,
) -> Result<Features> {
    let stages = backbone_forward(tape, bind, &cfg.backbone, image)?;
    let pyramid = build_pyramid(tape, bind, &cfg.backbone, cfg.pyramid, cfg.hard_block, &stages)?;
    let mut cls = Vec::with_capacity(pyramid.len());
    let mut boxes = Vec::with_capacity(pyramid.len());
    let mut fused = Vec::with_capacity(pyramid.len());
    for &level in &pyramid {
        cls.push(class_head_forward(tape, bind, &cfg.head, level)?);
        boxes.push(box_head_forward(tape, bind, &cfg.head, level)?);
        fused.push(fuse_multiscale(tape, bind, &cfg.fusion, level)?);
    }
    Ok(Features { pyramid, cls, boxes, fused, strides: cfg.backbone.strides.clone() })
}
