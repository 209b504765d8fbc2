//! Training label assignment: anchor box labels, mask-pixel selection, and
//! ground-truth mask target grids.

use crate::anchors::AnchorGrid;
use crate::error::{Result, SprError};
use crate::geom::{BBox, Mask};

/// Side length of the square mask target and reconstruction grid.
pub const MASK_SIZE: usize = 32;

/// Default IoU above which an anchor becomes a box positive.
pub const BOX_POS_IOU: f64 = 0.5;
/// Default IoU below which an anchor becomes a box negative.
pub const BOX_NEG_IOU: f64 = 0.4;
/// Default IoU above which a pixel becomes a mask positive.
pub const MASK_POS_IOU: f64 = 0.7;
/// Default cap on mask positives per image.
pub const MASK_POS_CAP: usize = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorState {
    /// Matched to the ground-truth instance with this index.
    Positive { gt: usize },
    Negative,
    Ignore,
}

/// Per-level anchor states, indexed like the level's anchors.
#[derive(Debug, Clone)]
pub struct BoxLabels {
    pub levels: Vec<Vec<AnchorState>>,
}

impl BoxLabels {
    pub fn count(&self, want: fn(&AnchorState) -> bool) -> usize {
        self.levels.iter().flatten().filter(|s| want(s)).count()
    }

    pub fn positives(&self) -> usize {
        self.count(|s| matches!(s, AnchorState::Positive { .. }))
    }
}

/// Best ground-truth match for one anchor: `(iou, gt index)`, ties between
/// ground truths broken toward the lower index.
fn best_gt(anchor: &BBox, gts: &[BBox]) -> (f64, usize) {
    let mut best = (0.0, 0usize);
    for (g, gt) in gts.iter().enumerate() {
        let iou = anchor.iou(gt);
        if iou > best.0 {
            best = (iou, g);
        }
    }
    best
}

/// Labels every anchor positive, negative, or ignore by its best IoU against
/// the ground-truth boxes. With no ground truths all anchors are negative.
pub fn assign_box_labels(
    grid: &AnchorGrid,
    gts: &[BBox],
    pos_iou: f64,
    neg_iou: f64,
) -> BoxLabels {
    let mut levels = Vec::with_capacity(grid.levels.len());
    for level in &grid.levels {
        let mut states = Vec::with_capacity(level.len());
        for anchor in &level.boxes {
            let (iou, gt) = best_gt(anchor, gts);
            states.push(if iou > pos_iou {
                AnchorState::Positive { gt }
            } else if iou < neg_iou {
                AnchorState::Negative
            } else {
                AnchorState::Ignore
            });
        }
        levels.push(states);
    }
    BoxLabels { levels }
}

/// One pixel selected for mask supervision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelPositive {
    pub level: usize,
    pub y: usize,
    pub x: usize,
    /// Anchor slot within the pixel that produced the best IoU.
    pub anchor: usize,
    /// Ground-truth instance the pixel is bound to.
    pub gt: usize,
    pub iou: f64,
}

/// Selects the mask-supervised pixels of one image. A pixel qualifies when
/// any of its anchors exceeds `pos_iou` against some ground truth; it is
/// bound to the ground truth of its best anchor. At most `cap` pixels
/// survive, ordered by descending IoU (ties resolved by level, row, column).
pub fn select_positive_pixels(
    grid: &AnchorGrid,
    gts: &[BBox],
    pos_iou: f64,
    cap: usize,
) -> Vec<PixelPositive> {
    let mut picks = Vec::new();
    for (lvl, level) in grid.levels.iter().enumerate() {
        for y in 0..level.h {
            for x in 0..level.w {
                let mut best: Option<PixelPositive> = None;
                for a in 0..level.per_pixel {
                    let anchor = &level.boxes[level.index(y, x, a)];
                    let (iou, gt) = best_gt(anchor, gts);
                    if iou > best.as_ref().map_or(0.0, |b| b.iou) {
                        best = Some(PixelPositive { level: lvl, y, x, anchor: a, gt, iou });
                    }
                }
                if let Some(b) = best {
                    if b.iou > pos_iou {
                        picks.push(b);
                    }
                }
            }
        }
    }
    picks.sort_by(|a, b| {
        b.iou
            .total_cmp(&a.iou)
            .then(a.level.cmp(&b.level))
            .then(a.y.cmp(&b.y))
            .then(a.x.cmp(&b.x))
    });
    picks.truncate(cap);
    picks
}

/// Resamples the ground-truth mask inside `bbox` onto the fixed square target
/// grid: bilinear at cell centers, then threshold at one half.
pub fn make_mask_target(mask: &Mask, bbox: &BBox) -> Result<Vec<u8>> {
    if !bbox.is_valid() {
        return Err(SprError::bad_arg(
            "mask_target",
            format!("degenerate box ({}, {}, {}, {})", bbox.x1, bbox.y1, bbox.x2, bbox.y2),
        ));
    }
    let (bw, bh) = (bbox.width(), bbox.height());
    let s = MASK_SIZE as f64;
    let mut out = vec![0u8; MASK_SIZE * MASK_SIZE];
    for i in 0..MASK_SIZE {
        let py = bbox.y1 + (i as f64 + 0.5) * bh / s;
        for j in 0..MASK_SIZE {
            let px = bbox.x1 + (j as f64 + 0.5) * bw / s;
            out[i * MASK_SIZE + j] = (mask.sample_bilinear(px, py) >= 0.5) as u8;
        }
    }
    Ok(out)
}
