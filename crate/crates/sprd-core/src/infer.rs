//! Inference: global top-k score selection, box decoding, one batched mask
//! reconstruction per image, per-class NMS, and mask pasting.

use crate::anchors::AnchorGrid;
use crate::config::RunConfig;
use crate::data::ppm::Image;
use crate::data::rle;
use crate::error::{Result, SprError};
use crate::geom::{decode_deltas, BBox, Mask};
use crate::mask_branch::{gather_pixel_features, reconstruct_mask, PixelRef};
use crate::model::{forward, Binding};
use crate::num::Element;
use crate::optim::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

/// One scored (level, y, x, anchor, class) tuple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub level: usize,
    pub y: usize,
    pub x: usize,
    pub anchor: usize,
    pub class: usize,
    pub score: f64,
}

/// Global top-k candidates across levels, pixels, anchors, and classes,
/// descending by score with ties broken by (level, y, x, anchor, class).
/// Scores below `floor` never qualify.
pub fn top_k_pixels<E: Element>(
    cls_logits: &[Tensor<E>],
    grid: &AnchorGrid,
    classes: usize,
    k: usize,
    floor: f64,
) -> Result<Vec<Candidate>> {
    if k == 0 {
        return Err(SprError::bad_arg("top_k_pixels", "k must be at least 1"));
    }
    if cls_logits.len() != grid.levels.len() {
        return Err(SprError::bad_arg("top_k_pixels", "one logit tensor per level required"));
    }
    let mut all = Vec::new();
    for (li, t) in cls_logits.iter().enumerate() {
        let lv = &grid.levels[li];
        let a_pp = lv.per_pixel;
        let shape = t.shape();
        if shape != [1, a_pp * classes, lv.h, lv.w] {
            return Err(SprError::ShapeMismatch {
                op: "top_k_pixels",
                left: shape,
                right: [1, a_pp * classes, lv.h, lv.w],
            });
        }
        for y in 0..lv.h {
            for x in 0..lv.w {
                for a in 0..a_pp {
                    for c in 0..classes {
                        let logit = t.at(0, a * classes + c, y, x).to_f64();
                        let score = 1.0 / (1.0 + (-logit).exp());
                        if score >= floor {
                            all.push(Candidate { level: li, y, x, anchor: a, class: c, score });
                        }
                    }
                }
            }
        }
    }
    all.sort_by(|p, q| {
        q.score
            .total_cmp(&p.score)
            .then(p.level.cmp(&q.level))
            .then(p.y.cmp(&q.y))
            .then(p.x.cmp(&q.x))
            .then(p.anchor.cmp(&q.anchor))
            .then(p.class.cmp(&q.class))
    });
    all.truncate(k);
    Ok(all)
}

/// A detection before or after NMS: box in image coordinates plus the 32x32
/// mask probability grid from its source pixel.
#[derive(Debug, Clone)]
pub struct Detection {
    pub class: usize,
    pub score: f64,
    pub bbox: BBox,
    pub mask32: Vec<f64>,
}

/// Greedy per-class suppression. Input must be sorted by descending score;
/// the survivors keep that order.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut keep: Vec<Detection> = Vec::new();
    for d in dets {
        let suppressed = keep
            .iter()
            .any(|k| k.class == d.class && k.bbox.iou(&d.bbox) > iou_thresh);
        if !suppressed {
            keep.push(d.clone());
        }
    }
    keep
}

/// Bilinearly resizes the 32x32 probability grid into the box and thresholds
/// it into a zero canvas. Every set pixel's center lies inside the box.
pub fn paste_mask(mask32: &[f64], bbox: &BBox, img_h: usize, img_w: usize, bin: f64) -> Mask {
    let mut out = Mask::zeros(img_w, img_h);
    let b = bbox.clamp_to(img_w as f64, img_h as f64);
    let (bw, bh) = (b.width(), b.height());
    if bw <= 0.0 || bh <= 0.0 {
        return out;
    }
    let sample = |u: f64, v: f64| -> f64 {
        // Grid cell centers sit at integer coordinates 0..31.
        let uc = u.clamp(0.0, 31.0);
        let vc = v.clamp(0.0, 31.0);
        let (u0, v0) = (uc.floor() as usize, vc.floor() as usize);
        let (u1, v1) = ((u0 + 1).min(31), (v0 + 1).min(31));
        let (fu, fv) = (uc - u0 as f64, vc - v0 as f64);
        let g = |yy: usize, xx: usize| mask32[yy * 32 + xx];
        g(v0, u0) * (1.0 - fu) * (1.0 - fv)
            + g(v0, u1) * fu * (1.0 - fv)
            + g(v1, u0) * (1.0 - fu) * fv
            + g(v1, u1) * fu * fv
    };
    let y_lo = b.y1.floor().max(0.0) as usize;
    let y_hi = (b.y2.ceil() as usize).min(img_h);
    let x_lo = b.x1.floor().max(0.0) as usize;
    let x_hi = (b.x2.ceil() as usize).min(img_w);
    for py in y_lo..y_hi {
        let cy = py as f64 + 0.5;
        if cy < b.y1 || cy >= b.y2 {
            continue;
        }
        let v = (cy - b.y1) / bh * 32.0 - 0.5;
        for px in x_lo..x_hi {
            let cx = px as f64 + 0.5;
            if cx < b.x1 || cx >= b.x2 {
                continue;
            }
            let u = (cx - b.x1) / bw * 32.0 - 0.5;
            if sample(u, v) >= bin {
                out.set(py, px, 1);
            }
        }
    }
    out
}

/// Full single-image inference. The mask decoder runs once, on the unique
/// source pixels of the surviving candidates (at most k columns).
pub fn detect_image<E: Element>(
    store: &ParamStore<E>,
    run: &RunConfig,
    image: &Image,
) -> Result<Vec<Detection>> {
    let m = &run.model;
    let grid = AnchorGrid::build(&m.anchors, image.h, image.w, &m.backbone.strides)?;
    let mut tape: Tape<E> = Tape::new();
    let bind = Binding::bind(&mut tape, store, false);
    let input = tape.leaf(image.to_input::<E>(), false);
    let feats = forward(&mut tape, &bind, m, input)?;

    let cls: Vec<Tensor<E>> = feats.cls.iter().map(|&v| tape.value(v).clone()).collect();
    let boxes: Vec<Tensor<E>> = feats.boxes.iter().map(|&v| tape.value(v).clone()).collect();
    let candidates =
        top_k_pixels(&cls, &grid, m.classes, run.infer.top_k, run.infer.score_floor)?;
    if candidates.is_empty() {
        return Ok(Vec::new());
    }

    // Decode boxes; drop degenerate ones before any mask work.
    let mut decoded: Vec<(Candidate, BBox)> = Vec::new();
    for c in &candidates {
        let lv = &grid.levels[c.level];
        let anchor = lv.boxes[lv.index(c.y, c.x, c.anchor)];
        let t = &boxes[c.level];
        let deltas = [
            t.at(0, c.anchor * 4, c.y, c.x).to_f64(),
            t.at(0, c.anchor * 4 + 1, c.y, c.x).to_f64(),
            t.at(0, c.anchor * 4 + 2, c.y, c.x).to_f64(),
            t.at(0, c.anchor * 4 + 3, c.y, c.x).to_f64(),
        ];
        let raw = decode_deltas(&anchor, &deltas);
        let clamped = raw.clamp_to(image.w as f64, image.h as f64);
        if clamped.width() * clamped.height() < 1.0 {
            continue;
        }
        decoded.push((*c, clamped));
    }
    if decoded.is_empty() {
        return Ok(Vec::new());
    }

    // One decoder pass over the unique source pixels.
    let mut pixels: Vec<PixelRef> = Vec::new();
    let mut pixel_of: Vec<usize> = Vec::with_capacity(decoded.len());
    for (c, _) in &decoded {
        let r = PixelRef { level: c.level, n: 0, y: c.y, x: c.x };
        let at = pixels.iter().position(|p| p == &r).unwrap_or_else(|| {
            pixels.push(r);
            pixels.len() - 1
        });
        pixel_of.push(at);
    }
    let (cols, order) = gather_pixel_features(&mut tape, &feats.fused, &pixels)?;
    let dec = reconstruct_mask(&mut tape, &bind, &m.decoder, cols)?;
    let logits = tape.value(dec.logits);
    // Row r of the decoder output holds pixels[order[r]].
    let mut row_of_pixel = vec![0usize; pixels.len()];
    for (row, &orig) in order.iter().enumerate() {
        row_of_pixel[orig] = row;
    }

    let dets: Vec<Detection> = decoded
        .iter()
        .enumerate()
        .map(|(i, (c, bbox))| {
            let row = row_of_pixel[pixel_of[i]];
            let mut mask32 = Vec::with_capacity(32 * 32);
            for y in 0..32 {
                for x in 0..32 {
                    let logit = logits.at(row, c.class, y, x).to_f64();
                    mask32.push(1.0 / (1.0 + (-logit).exp()));
                }
            }
            Detection { class: c.class, score: c.score, bbox: *bbox, mask32 }
        })
        .collect();
    Ok(nms(&dets, run.infer.nms_iou))
}

/// Serialized detection: full-image mask as RLE.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DetectionRec {
    pub image_id: usize,
    pub class: usize,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub mask_rle: Vec<u32>,
}

pub fn to_record(det: &Detection, image_id: usize, img_h: usize, img_w: usize, bin: f64) -> DetectionRec {
    let pasted = paste_mask(&det.mask32, &det.bbox, img_h, img_w, bin);
    DetectionRec {
        image_id,
        class: det.class,
        score: det.score,
        bbox: [det.bbox.x1, det.bbox.y1, det.bbox.x2, det.bbox.y2],
        mask_rle: rle::encode(&pasted),
    }
}

pub fn write_detections(path: &Path, recs: &[DetectionRec]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(recs)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRec>> {
    let text = fs::read_to_string(path).map_err(|e| SprError::Data(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text).map_err(|e| SprError::Data(format!("{}: {e}", path.display())))?)
}
