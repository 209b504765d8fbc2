//! Training losses: focal classification, smooth-L1 box regression, on-class
//! mask binary cross-entropy, and their weighted total.

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorGrid;
use crate::assign::{
    assign_box_labels, make_mask_target, select_positive_pixels, AnchorState, BoxLabels,
    PixelPositive, MASK_SIZE,
};
use crate::error::{Result, SprError};
use crate::geom::{encode_deltas, BBox, Mask};
use crate::mask_branch::{gather_pixel_features, reconstruct_mask, DecoderConfig, PixelRef};
use crate::model::Binding;
use crate::num::Element;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::ColRef;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    /// Focal-loss positive-class weight.
    pub alpha: f64,
    /// Focal-loss focusing exponent.
    pub gamma: f64,
    /// Smooth-L1 quadratic-to-linear crossover.
    pub beta: f64,
    pub w_cls: f64,
    pub w_reg: f64,
    pub w_mask: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 0.25, gamma: 2.0, beta: 1.0 / 9.0, w_cls: 1.0, w_reg: 1.0, w_mask: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(SprError::Config(format!("alpha {} outside (0,1)", self.alpha)));
        }
        if self.gamma < 0.0 || self.beta <= 0.0 {
            return Err(SprError::Config("gamma must be >= 0 and beta > 0".into()));
        }
        if self.w_cls < 0.0 || self.w_reg < 0.0 || self.w_mask < 0.0 {
            return Err(SprError::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Training targets of one image.
#[derive(Debug, Clone)]
pub struct ImageTargets {
    pub labels: BoxLabels,
    pub gt_boxes: Vec<BBox>,
    pub gt_classes: Vec<usize>,
    /// Pixels selected for mask supervision, already capped.
    pub mask_pixels: Vec<PixelPositive>,
    /// One 32x32 binary grid per selected pixel.
    pub mask_targets: Vec<Vec<u8>>,
}

/// Runs label assignment and mask-target extraction for one image.
pub fn prepare_image_targets(
    grid: &AnchorGrid,
    gt_boxes: &[BBox],
    gt_classes: &[usize],
    gt_masks: &[Mask],
    box_pos_iou: f64,
    box_neg_iou: f64,
    mask_pos_iou: f64,
    mask_cap: usize,
) -> Result<ImageTargets> {
    if gt_boxes.len() != gt_classes.len() || gt_boxes.len() != gt_masks.len() {
        return Err(SprError::bad_arg("prepare_image_targets", "gt arrays disagree in length"));
    }
    let labels = assign_box_labels(grid, gt_boxes, box_pos_iou, box_neg_iou);
    let mask_pixels = select_positive_pixels(grid, gt_boxes, mask_pos_iou, mask_cap);
    let mut per_gt: Vec<Option<Vec<u8>>> = vec![None; gt_boxes.len()];
    let mut mask_targets = Vec::with_capacity(mask_pixels.len());
    for p in &mask_pixels {
        if per_gt[p.gt].is_none() {
            per_gt[p.gt] = Some(make_mask_target(&gt_masks[p.gt], &gt_boxes[p.gt])?);
        }
        mask_targets.push(per_gt[p.gt].clone().unwrap());
    }
    Ok(ImageTargets { labels, gt_boxes: gt_boxes.to_vec(), gt_classes: gt_classes.to_vec(), mask_pixels, mask_targets })
}

impl ImageTargets {
    /// Keeps at most `n` mask pixels, chosen deterministically by a rotating
    /// offset so successive steps cycle through the full selection.
    pub fn subsample_mask_pixels(&mut self, n: usize, step: u64) {
        if self.mask_pixels.len() <= n || n == 0 {
            return;
        }
        let len = self.mask_pixels.len();
        let start = (step as usize * n) % len;
        let mut pixels = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        for i in 0..n {
            let j = (start + i) % len;
            pixels.push(self.mask_pixels[j]);
            targets.push(self.mask_targets[j].clone());
        }
        self.mask_pixels = pixels;
        self.mask_targets = targets;
    }

    pub fn positives(&self) -> usize {
        self.labels.positives()
    }
}

/// Focal loss over every non-ignored anchor and class, summed across levels
/// and normalized by max(1, total positive anchors). Class logits use the
/// channel layout a*K + k. Returns the loss and the positive count.
pub fn classification_loss<E: Element>(
    tape: &mut Tape<E>,
    cls_levels: &[Var],
    grid: &AnchorGrid,
    images: &[ImageTargets],
    classes: usize,
    cfg: &LossConfig,
) -> Result<(Var, usize)> {
    let positives: usize = images.iter().map(|t| t.positives()).sum();
    let mut level_sums = Vec::with_capacity(cls_levels.len());
    for (lvl, &logits) in cls_levels.iter().enumerate() {
        let shape = tape.shape(logits);
        let level = &grid.levels[lvl];
        let a_per = level.per_pixel;
        if shape[1] != a_per * classes || shape[2] != level.h || shape[3] != level.w {
            return Err(SprError::bad_arg(
                "classification_loss",
                format!("level {lvl} logits {shape:?} do not match {}x{} anchors", level.h, level.w),
            ));
        }
        if shape[0] != images.len() {
            return Err(SprError::bad_arg("classification_loss", "batch size mismatch"));
        }
        let mut targets = Tensor::zeros(shape);
        let mut weights = Tensor::full(shape, E::ONE);
        for (n, img) in images.iter().enumerate() {
            let states = &img.labels.levels[lvl];
            for y in 0..level.h {
                for x in 0..level.w {
                    for a in 0..a_per {
                        match states[level.index(y, x, a)] {
                            AnchorState::Positive { gt } => {
                                let k = img.gt_classes[gt];
                                *targets.at_mut(n, a * classes + k, y, x) = E::ONE;
                            }
                            AnchorState::Negative => {}
                            AnchorState::Ignore => {
                                for k in 0..classes {
                                    *weights.at_mut(n, a * classes + k, y, x) = E::ZERO;
                                }
                            }
                        }
                    }
                }
            }
        }
        let term = tape.focal_term(logits, targets, weights, cfg.alpha, cfg.gamma)?;
        level_sums.push(tape.sum_all(term));
    }
    let mut total = level_sums[0];
    for &s in &level_sums[1..] {
        total = tape.add(total, s)?;
    }
    let norm = tape.mul_scalar(total, 1.0 / positives.max(1) as f64);
    Ok((norm, positives))
}

/// Smooth-L1 on the delta predictions of positive anchors, summed and
/// normalized by max(1, positives). Box outputs use the channel layout a*4+i.
pub fn regression_loss<E: Element>(
    tape: &mut Tape<E>,
    box_levels: &[Var],
    grid: &AnchorGrid,
    images: &[ImageTargets],
    cfg: &LossConfig,
    positives: usize,
) -> Result<Var> {
    let mut terms = Vec::new();
    for (lvl, &deltas) in box_levels.iter().enumerate() {
        let level = &grid.levels[lvl];
        let mut refs = Vec::new();
        let mut target_vals = Vec::new();
        for (n, img) in images.iter().enumerate() {
            let states = &img.labels.levels[lvl];
            for y in 0..level.h {
                for x in 0..level.w {
                    for a in 0..level.per_pixel {
                        if let AnchorState::Positive { gt } = states[level.index(y, x, a)] {
                            refs.push(ColRef { n, c0: a * 4, c_len: 4, y, x });
                            let anchor = &level.boxes[level.index(y, x, a)];
                            let d = encode_deltas(anchor, &img.gt_boxes[gt]);
                            target_vals.extend(d.iter().map(|&v| E::from_f64(v)));
                        }
                    }
                }
            }
        }
        if refs.is_empty() {
            continue;
        }
        let m = refs.len();
        let picked = tape.gather_cols(deltas, refs)?;
        let targets = Tensor::from_vec([m, 4, 1, 1], target_vals)?;
        let weights = Tensor::full([m, 4, 1, 1], E::ONE);
        let term = tape.smooth_l1_term(picked, targets, weights, cfg.beta)?;
        terms.push(tape.sum_all(term));
    }
    if terms.is_empty() {
        return Ok(tape.leaf(Tensor::scalar(E::ZERO), false));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(tape.mul_scalar(total, 1.0 / positives.max(1) as f64))
}

/// Binary cross-entropy on the ground-truth class channel of decoded mask
/// logits, averaged over all M*32*32 supervised cells.
pub fn mask_bce_from_logits<E: Element>(
    tape: &mut Tape<E>,
    logits: Var,
    targets: &[Vec<u8>],
    class_ids: &[usize],
) -> Result<Var> {
    let shape = tape.shape(logits);
    let (m, k) = (shape[0], shape[1]);
    if m != targets.len() || m != class_ids.len() {
        return Err(SprError::bad_arg("mask_bce_from_logits", "target count mismatch"));
    }
    if shape[2] != MASK_SIZE || shape[3] != MASK_SIZE {
        return Err(SprError::bad_arg("mask_bce_from_logits", format!("logits {shape:?} are not 32x32")));
    }
    let mut t = Tensor::zeros(shape);
    let mut w = Tensor::zeros(shape);
    let cell_weight = E::from_f64(1.0 / (m * MASK_SIZE * MASK_SIZE) as f64);
    for (row, (grid, &class_id)) in targets.iter().zip(class_ids).enumerate() {
        if class_id >= k {
            return Err(SprError::bad_arg(
                "mask_bce_from_logits",
                format!("class {class_id} out of range for {k} channels"),
            ));
        }
        if grid.len() != MASK_SIZE * MASK_SIZE {
            return Err(SprError::bad_arg("mask_bce_from_logits", "target grid is not 32x32"));
        }
        for (i, &v) in grid.iter().enumerate() {
            let (y, x) = (i / MASK_SIZE, i % MASK_SIZE);
            if v != 0 {
                *t.at_mut(row, class_id, y, x) = E::ONE;
            }
            *w.at_mut(row, class_id, y, x) = cell_weight;
        }
    }
    // Focal with gamma 0 and alpha one-half is half of binary cross-entropy.
    let half_bce = tape.focal_term(logits, t, w, 0.5, 0.0)?;
    let sum = tape.sum_all(half_bce);
    Ok(tape.mul_scalar(sum, 2.0))
}

/// Gathers the supervised pixels of a batch, reconstructs their masks, and
/// applies on-class BCE. Zero supervised pixels contribute exactly zero.
/// Returns the loss and the decoded pixel count.
pub fn mask_loss<E: Element>(
    tape: &mut Tape<E>,
    bind: &Binding,
    decoder: &DecoderConfig,
    fused_levels: &[Var],
    images: &[ImageTargets],
) -> Result<(Var, usize)> {
    let mut refs = Vec::new();
    let mut targets = Vec::new();
    let mut class_ids = Vec::new();
    for (n, img) in images.iter().enumerate() {
        for (p, t) in img.mask_pixels.iter().zip(&img.mask_targets) {
            refs.push(PixelRef { level: p.level, n, y: p.y, x: p.x });
            targets.push(t.clone());
            class_ids.push(img.gt_classes[p.gt]);
        }
    }
    if refs.is_empty() {
        return Ok((tape.leaf(Tensor::scalar(E::ZERO), false), 0));
    }
    let (pixels, order) = gather_pixel_features(tape, fused_levels, &refs)?;
    let decoded = reconstruct_mask(tape, bind, decoder, pixels)?;
    let ordered_targets: Vec<Vec<u8>> = order.iter().map(|&i| targets[i].clone()).collect();
    let ordered_classes: Vec<usize> = order.iter().map(|&i| class_ids[i]).collect();
    let loss = mask_bce_from_logits(tape, decoded.logits, &ordered_targets, &ordered_classes)?;
    Ok((loss, refs.len()))
}

/// Weighted sum of the three parts.
pub fn total_loss<E: Element>(
    tape: &mut Tape<E>,
    cls: Var,
    reg: Var,
    mask: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    let c = tape.mul_scalar(cls, cfg.w_cls);
    let r = tape.mul_scalar(reg, cfg.w_reg);
    let m = tape.mul_scalar(mask, cfg.w_mask);
    let cr = tape.add(c, r)?;
    tape.add(cr, m)
}

/// All loss scalars of one training step.
pub struct LossParts {
    pub cls: Var,
    pub reg: Var,
    pub mask: Var,
    pub total: Var,
    pub positives: usize,
    pub mask_pixels: usize,
}

/// Builds the full loss graph for a forward pass.
pub fn build_losses<E: Element>(
    tape: &mut Tape<E>,
    bind: &Binding,
    features: &crate::model::Features,
    decoder: &DecoderConfig,
    grid: &AnchorGrid,
    images: &[ImageTargets],
    classes: usize,
    cfg: &LossConfig,
) -> Result<LossParts> {
    cfg.validate()?;
    let (cls, positives) = classification_loss(tape, &features.cls, grid, images, classes, cfg)?;
    let reg = regression_loss(tape, &features.boxes, grid, images, cfg, positives)?;
    let (mask, mask_pixels) = mask_loss(tape, bind, decoder, &features.fused, images)?;
    let total = total_loss(tape, cls, reg, mask, cfg)?;
    Ok(LossParts { cls, reg, mask, total, positives, mask_pixels })
}
