//! Boxes, binary masks, IoU, and box-delta coding.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    pub fn is_valid(&self) -> bool {
        self.x2 > self.x1
            && self.y2 > self.y1
            && [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let iy = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn clamp_to(&self, w: f64, h: f64) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        }
    }
}

/// (tx, ty, tw, th) of `gt` relative to `anchor`.
pub fn encode_deltas(anchor: &BBox, gt: &BBox) -> [f64; 4] {
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    [
        (gcx - acx) / anchor.width(),
        (gcy - acy) / anchor.height(),
        (gt.width() / anchor.width()).ln(),
        (gt.height() / anchor.height()).ln(),
    ]
}

pub fn decode_deltas(anchor: &BBox, d: &[f64; 4]) -> BBox {
    let (acx, acy) = anchor.center();
    let cx = acx + d[0] * anchor.width();
    let cy = acy + d[1] * anchor.height();
    let w = anchor.width() * d[2].exp();
    let h = anchor.height() * d[3].exp();
    BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

/// Dense binary mask over the full image, one byte per pixel, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub w: usize,
    pub h: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn zeros(w: usize, h: usize) -> Self {
        Mask { w, h, data: vec![0; w * h] }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.w + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Tight bounding box in pixel-boundary coordinates, None when empty.
    pub fn tight_bbox(&self) -> Option<BBox> {
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0usize, 0usize);
        let mut any = false;
        for y in 0..self.h {
            for x in 0..self.w {
                if self.at(y, x) != 0 {
                    any = true;
                    x1 = x1.min(x);
                    y1 = y1.min(y);
                    x2 = x2.max(x);
                    y2 = y2.max(y);
                }
            }
        }
        any.then(|| BBox::new(x1 as f64, y1 as f64, (x2 + 1) as f64, (y2 + 1) as f64))
    }

    pub fn iou(&self, other: &Mask) -> Option<f64> {
        if self.w != other.w || self.h != other.h {
            return None;
        }
        let mut inter = 0usize;
        let mut union = 0usize;
        for (a, b) in self.data.iter().zip(&other.data) {
            let (a, b) = (*a != 0, *b != 0);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        Some(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
    }

    /// Bilinear sample at continuous image coordinates (pixel centers at +0.5).
    pub fn sample_bilinear(&self, px: f64, py: f64) -> f64 {
        let u = (px - 0.5).clamp(0.0, (self.w - 1) as f64);
        let v = (py - 0.5).clamp(0.0, (self.h - 1) as f64);
        let x0 = u.floor() as usize;
        let y0 = v.floor() as usize;
        let x1 = (x0 + 1).min(self.w - 1);
        let y1 = (y0 + 1).min(self.h - 1);
        let fx = u - x0 as f64;
        let fy = v - y0 as f64;
        let g = |y: usize, x: usize| self.at(y, x) as f64;
        (1.0 - fy) * ((1.0 - fx) * g(y0, x0) + fx * g(y0, x1))
            + fy * ((1.0 - fx) * g(y1, x0) + fx * g(y1, x1))
    }
}
