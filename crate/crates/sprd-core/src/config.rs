//! Flat key=value run configuration. Every tunable default is captured here,
//! so a run is reproducible from config text + seed + dataset.

use crate::error::{Result, SprError};
use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::optim::AdamConfig;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::str::FromStr;

/// fast = f32 training; verify = f64, bit-reproducible outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Fast,
    Verify,
}

impl FromStr for Precision {
    type Err = SprError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(Precision::Fast),
            "verify" => Ok(Precision::Verify),
            other => Err(SprError::Config(format!("unknown precision {other:?}"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::Fast => "fast",
            Precision::Verify => "verify",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssignConfig {
    pub box_pos_iou: f64,
    pub box_neg_iou: f64,
    pub mask_pos_iou: f64,
    pub mask_cap: usize,
}

impl Default for AssignConfig {
    fn default() -> Self {
        AssignConfig { box_pos_iou: 0.5, box_neg_iou: 0.4, mask_pos_iou: 0.7, mask_cap: 300 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    /// Mask pixels fed to the decoder per image per step.
    pub mask_pixels: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 2,
            adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
            clip_norm: 1e-3,
            mask_pixels: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferConfig {
    pub score_floor: f64,
    pub top_k: usize,
    pub nms_iou: f64,
    /// Pasted-mask binarization threshold.
    pub mask_bin: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig { score_floor: 0.05, top_k: 100, nms_iou: 0.5, mask_bin: 0.5 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub model: ModelConfig,
    pub assign: AssignConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
}

impl Default for Precision {
    fn default() -> Self {
        Precision::Fast
    }
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list<T: FromStr>(v: &str, key: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|s| s.trim().parse().map_err(|_| SprError::Config(format!("{key}: bad element {s:?}"))))
        .collect()
}

fn parse_one<T: FromStr>(v: &str, key: &str) -> Result<T> {
    v.parse().map_err(|_| SprError::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_switch(v: &str, key: &str) -> Result<bool> {
    match v {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        other => Err(SprError::Config(format!("{key}: expected on/off, got {other:?}"))),
    }
}

impl RunConfig {
    /// Canonical text: fixed key order, every key present.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        let w = &mut s;
        let _ = writeln!(w, "seed = {}", self.seed);
        let _ = writeln!(w, "precision = {}", self.precision);
        let _ = writeln!(w, "classes = {}", m.classes);
        let _ = writeln!(w, "backbone.widths = {}", join(&m.backbone.widths));
        let _ = writeln!(w, "backbone.strides = {}", join(&m.backbone.strides));
        let _ = writeln!(w, "backbone.pyramid_width = {}", m.backbone.pyramid_width);
        let _ = writeln!(w, "pyramid = {}", m.pyramid);
        let _ = writeln!(w, "pyramid.hard_block = {}", if m.hard_block { "on" } else { "off" });
        let _ = writeln!(w, "head.tower_depth = {}", m.head.tower_depth);
        let _ = writeln!(w, "head.prior = {}", m.head.prior);
        let _ = writeln!(w, "anchors.base_sizes = {}", join(&m.anchors.base_sizes));
        let _ = writeln!(w, "anchors.scales = {}", join(&m.anchors.scales));
        let _ = writeln!(w, "anchors.ratios = {}", join(&m.anchors.ratios));
        let _ = writeln!(w, "fusion.mode = {}", m.fusion.mode);
        let _ = writeln!(w, "fusion.point_width = {}", m.fusion.point_width);
        let _ = writeln!(w, "fusion.dilated_width = {}", m.fusion.dilated_width);
        let _ = writeln!(w, "decoder.deconv_widths = {}", join(&m.decoder.deconv_widths));
        let _ = writeln!(w, "decoder.up_widths = {}", join(&m.decoder.up_widths));
        let _ = writeln!(w, "decoder.shortcut = {}", if m.decoder.shortcut { "on" } else { "off" });
        let a = &self.assign;
        let _ = writeln!(w, "assign.box_pos_iou = {}", a.box_pos_iou);
        let _ = writeln!(w, "assign.box_neg_iou = {}", a.box_neg_iou);
        let _ = writeln!(w, "assign.mask_pos_iou = {}", a.mask_pos_iou);
        let _ = writeln!(w, "assign.mask_cap = {}", a.mask_cap);
        let l = &self.loss;
        let _ = writeln!(w, "loss.alpha = {}", l.alpha);
        let _ = writeln!(w, "loss.gamma = {}", l.gamma);
        let _ = writeln!(w, "loss.beta = {}", l.beta);
        let _ = writeln!(w, "loss.w_cls = {}", l.w_cls);
        let _ = writeln!(w, "loss.w_reg = {}", l.w_reg);
        let _ = writeln!(w, "loss.w_mask = {}", l.w_mask);
        let t = &self.train;
        let _ = writeln!(w, "train.steps = {}", t.steps);
        let _ = writeln!(w, "train.batch_size = {}", t.batch_size);
        let _ = writeln!(w, "train.lr = {}", t.adam.lr);
        let _ = writeln!(w, "train.beta1 = {}", t.adam.beta1);
        let _ = writeln!(w, "train.beta2 = {}", t.adam.beta2);
        let _ = writeln!(w, "train.eps = {}", t.adam.eps);
        let _ = writeln!(w, "train.clip_norm = {}", t.clip_norm);
        let _ = writeln!(w, "train.mask_pixels = {}", t.mask_pixels);
        let i = &self.infer;
        let _ = writeln!(w, "infer.score_floor = {}", i.score_floor);
        let _ = writeln!(w, "infer.top_k = {}", i.top_k);
        let _ = writeln!(w, "infer.nms_iou = {}", i.nms_iou);
        let _ = writeln!(w, "infer.mask_bin = {}", i.mask_bin);
        s
    }

    /// Parses overrides on top of defaults. Blank lines and # comments are
    /// skipped; unknown keys are rejected with their line number.
    pub fn from_text(text: &str) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| SprError::Config(format!("line {}: expected key = value", ln + 1)))?;
            let (key, v) = (key.trim(), value.trim());
            c.apply(key, v)
                .map_err(|e| SprError::Config(format!("line {}: {e}", ln + 1)))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn apply(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "seed" => self.seed = parse_one(v, key)?,
            "precision" => self.precision = v.parse()?,
            "classes" => m.classes = parse_one(v, key)?,
            "backbone.widths" => m.backbone.widths = parse_list(v, key)?,
            "backbone.strides" => m.backbone.strides = parse_list(v, key)?,
            "backbone.pyramid_width" => m.backbone.pyramid_width = parse_one(v, key)?,
            "pyramid" => m.pyramid = v.parse()?,
            "pyramid.hard_block" => m.hard_block = parse_switch(v, key)?,
            "head.tower_depth" => m.head.tower_depth = parse_one(v, key)?,
            "head.prior" => m.head.prior = parse_one(v, key)?,
            "anchors.base_sizes" => m.anchors.base_sizes = parse_list(v, key)?,
            "anchors.scales" => m.anchors.scales = parse_list(v, key)?,
            "anchors.ratios" => m.anchors.ratios = parse_list(v, key)?,
            "fusion.mode" => m.fusion.mode = v.parse()?,
            "fusion.point_width" => m.fusion.point_width = parse_one(v, key)?,
            "fusion.dilated_width" => m.fusion.dilated_width = parse_one(v, key)?,
            "decoder.deconv_widths" => {
                let xs: Vec<usize> = parse_list(v, key)?;
                m.decoder.deconv_widths = xs
                    .try_into()
                    .map_err(|_| SprError::Config(format!("{key}: need exactly 3 widths")))?;
            }
            "decoder.up_widths" => {
                let xs: Vec<usize> = parse_list(v, key)?;
                m.decoder.up_widths = xs
                    .try_into()
                    .map_err(|_| SprError::Config(format!("{key}: need exactly 2 widths")))?;
            }
            "decoder.shortcut" => m.decoder.shortcut = parse_switch(v, key)?,
            "assign.box_pos_iou" => self.assign.box_pos_iou = parse_one(v, key)?,
            "assign.box_neg_iou" => self.assign.box_neg_iou = parse_one(v, key)?,
            "assign.mask_pos_iou" => self.assign.mask_pos_iou = parse_one(v, key)?,
            "assign.mask_cap" => self.assign.mask_cap = parse_one(v, key)?,
            "loss.alpha" => self.loss.alpha = parse_one(v, key)?,
            "loss.gamma" => self.loss.gamma = parse_one(v, key)?,
            "loss.beta" => self.loss.beta = parse_one(v, key)?,
            "loss.w_cls" => self.loss.w_cls = parse_one(v, key)?,
            "loss.w_reg" => self.loss.w_reg = parse_one(v, key)?,
            "loss.w_mask" => self.loss.w_mask = parse_one(v, key)?,
            "train.steps" => self.train.steps = parse_one(v, key)?,
            "train.batch_size" => self.train.batch_size = parse_one(v, key)?,
            "train.lr" => self.train.adam.lr = parse_one(v, key)?,
            "train.beta1" => self.train.adam.beta1 = parse_one(v, key)?,
            "train.beta2" => self.train.adam.beta2 = parse_one(v, key)?,
            "train.eps" => self.train.adam.eps = parse_one(v, key)?,
            "train.clip_norm" => self.train.clip_norm = parse_one(v, key)?,
            "train.mask_pixels" => self.train.mask_pixels = parse_one(v, key)?,
            "infer.score_floor" => self.infer.score_floor = parse_one(v, key)?,
            "infer.top_k" => self.infer.top_k = parse_one(v, key)?,
            "infer.nms_iou" => self.infer.nms_iou = parse_one(v, key)?,
            "infer.mask_bin" => self.infer.mask_bin = parse_one(v, key)?,
            other => return Err(SprError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let a = &self.assign;
        if !(a.box_neg_iou <= a.box_pos_iou && a.box_pos_iou <= 1.0 && a.box_neg_iou >= 0.0) {
            return Err(SprError::Config("assign thresholds must satisfy 0 <= neg <= pos <= 1".into()));
        }
        if !(0.0..=1.0).contains(&a.mask_pos_iou) {
            return Err(SprError::Config("assign.mask_pos_iou out of [0, 1]".into()));
        }
        let t = &self.train;
        if t.batch_size == 0 || t.mask_pixels == 0 {
            return Err(SprError::Config("train.batch_size and train.mask_pixels must be positive".into()));
        }
        if !(t.adam.lr > 0.0 && t.clip_norm > 0.0) {
            return Err(SprError::Config("train.lr and train.clip_norm must be positive".into()));
        }
        let i = &self.infer;
        if i.top_k == 0 || !(0.0..=1.0).contains(&i.nms_iou) || !(0.0..=1.0).contains(&i.mask_bin) {
            return Err(SprError::Config("infer settings out of range".into()));
        }
        Ok(())
    }

    /// sha256 of the canonical text, hex-encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_text().as_bytes());
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}
