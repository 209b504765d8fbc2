//! Dense anchor grids over pyramid levels.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SprError};
use crate::geom::BBox;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnchorConfig {
    /// Base size per pyramid level, in pixels.
    pub base_sizes: Vec<f64>,
    /// Per-level octave multipliers applied to the base size.
    pub scales: Vec<f64>,
    /// Aspect ratios w/h.
    pub ratios: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            base_sizes: vec![16.0, 32.0, 64.0],
            scales: vec![1.0, 2f64.powf(1.0 / 3.0), 2f64.powf(2.0 / 3.0)],
            ratios: vec![0.5, 1.0, 2.0],
        }
    }
}

impl AnchorConfig {
    /// Anchors per pixel.
    pub fn per_pixel(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }
}

/// All anchors of one pyramid level, indexed `(y * w + x) * A + a`.
#[derive(Debug, Clone)]
pub struct LevelAnchors {
    pub h: usize,
    pub w: usize,
    pub stride: usize,
    pub per_pixel: usize,
    pub boxes: Vec<BBox>,
}

impl LevelAnchors {
    #[inline]
    pub fn index(&self, y: usize, x: usize, a: usize) -> usize {
        (y * self.w + x) * self.per_pixel + a
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Anchor grids for every pyramid level of one image size.
#[derive(Debug, Clone)]
pub struct AnchorGrid {
    pub levels: Vec<LevelAnchors>,
}

impl AnchorGrid {
    /// Builds anchors for an image of `img_h` x `img_w` pixels over the given
    /// strides. The image size must be divisible by every stride.
    pub fn build(
        cfg: &AnchorConfig,
        img_h: usize,
        img_w: usize,
        strides: &[usize],
    ) -> Result<AnchorGrid> {
        if cfg.base_sizes.len() != strides.len() {
            return Err(SprError::bad_arg(
                "anchor_grid",
                format!(
                    "{} base sizes for {} strides",
                    cfg.base_sizes.len(),
                    strides.len()
                ),
            ));
        }
        if cfg.scales.is_empty() || cfg.ratios.is_empty() {
            return Err(SprError::bad_arg("anchor_grid", "empty scales or ratios"));
        }
        let mut levels = Vec::with_capacity(strides.len());
        for (lvl, &stride) in strides.iter().enumerate() {
            if stride == 0 || img_h % stride != 0 || img_w % stride != 0 {
                return Err(SprError::bad_arg(
                    "anchor_grid",
                    format!("image {img_h}x{img_w} not divisible by stride {stride}"),
                ));
            }
            let h = img_h / stride;
            let w = img_w / stride;
            let a = cfg.per_pixel();
            let mut boxes = Vec::with_capacity(h * w * a);
            for y in 0..h {
                for x in 0..w {
                    let cx = (x as f64 + 0.5) * stride as f64;
                    let cy = (y as f64 + 0.5) * stride as f64;
                    for &scale in &cfg.scales {
                        let size = cfg.base_sizes[lvl] * scale;
                        for &ratio in &cfg.ratios {
                            let bw = size * ratio.sqrt();
                            let bh = size / ratio.sqrt();
                            boxes.push(BBox::new(
                                cx - 0.5 * bw,
                                cy - 0.5 * bh,
                                cx + 0.5 * bw,
                                cy + 0.5 * bh,
                            ));
                        }
                    }
                }
            }
            levels.push(LevelAnchors { h, w, stride, per_pixel: a, boxes });
        }
        Ok(AnchorGrid { levels })
    }

    pub fn total(&self) -> usize {
        self.levels.iter().map(|l| l.len()).sum()
    }
}
