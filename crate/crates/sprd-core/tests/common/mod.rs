//! Helpers shared between integration test targets: mask constructors, a
//! noisy 20-image fixture, and a naive reference evaluator written directly
//! from the metric definitions.

#![allow(dead_code)]

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use sprd_core::data::synth::{synth_scene, SceneSpec};
use sprd_core::eval::{EvalDet, EvalImage, GtInstance};
use sprd_core::{BBox, KindMetrics, Mask};

pub fn block_mask(h: usize, w: usize, x1: usize, y1: usize, x2: usize, y2: usize) -> Mask {
    let mut m = Mask::zeros(w, h);
    for y in y1..y2.min(h) {
        for x in x1..x2.min(w) {
            m.set(y, x, 1);
        }
    }
    m
}

pub fn shift_mask(m: &Mask, dx: i64, dy: i64) -> Mask {
    let mut out = Mask::zeros(m.w, m.h);
    for y in 0..m.h {
        for x in 0..m.w {
            if m.at(y, x) != 0 {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx >= 0 && ny >= 0 && (nx as usize) < m.w && (ny as usize) < m.h {
                    out.set(ny as usize, nx as usize, 1);
                }
            }
        }
    }
    out
}

pub fn all_fields(m: &KindMetrics) -> [Option<f64>; 12] {
    [
        m.ap, m.ap50, m.ap75, m.ap_small, m.ap_medium, m.ap_large,
        m.ar_1, m.ar_10, m.ar_100, m.ar_small, m.ar_medium, m.ar_large,
    ]
}

/// Twenty synthetic scenes with jittered, duplicated, and spurious
/// detections: misses, near-misses, and score noise included.
pub fn noisy_fixture() -> Vec<EvalImage> {
    let mut rng = StdRng::seed_from_u64(123);
    let spec = SceneSpec { seed: 123, image_size: 128, ..SceneSpec::default() };
    let mut images = Vec::new();
    for idx in 0..20u64 {
        let scene = synth_scene(&spec, idx).unwrap();
        let mut gts = Vec::new();
        let mut dets = Vec::new();
        for inst in &scene.instances {
            gts.push(GtInstance { class: inst.class, bbox: inst.bbox, mask: inst.mask.clone() });
            if rng.random_bool(0.15) {
                continue; // missed instance
            }
            let copies = 1 + rng.random_bool(0.25) as usize;
            for _ in 0..copies {
                let (w, h) = (inst.bbox.width(), inst.bbox.height());
                let dx = rng.random_range(-0.2..0.2) * w;
                let dy = rng.random_range(-0.2..0.2) * h;
                let grow = rng.random_range(0.85..1.2);
                let bbox = BBox::new(
                    inst.bbox.x1 + dx,
                    inst.bbox.y1 + dy,
                    inst.bbox.x1 + dx + w * grow,
                    inst.bbox.y1 + dy + h * grow,
                );
                let class = if rng.random_bool(0.08) { (inst.class + 1) % 3 } else { inst.class };
                dets.push(EvalDet {
                    class,
                    score: rng.random_range(0.3..1.0),
                    bbox: bbox.clamp_to(128.0, 128.0),
                    mask: shift_mask(&inst.mask, dx.round() as i64, dy.round() as i64),
                });
            }
        }
        for _ in 0..rng.random_range(0..3usize) {
            let x1 = rng.random_range(0.0..100.0);
            let y1 = rng.random_range(0.0..100.0);
            let (w, h) = (rng.random_range(6.0..30.0), rng.random_range(6.0..30.0));
            let bbox = BBox::new(x1, y1, (x1 + w).min(128.0), (y1 + h).min(128.0));
            dets.push(EvalDet {
                class: rng.random_range(0..3),
                score: rng.random_range(0.05..0.8),
                bbox,
                mask: block_mask(128, 128, x1 as usize, y1 as usize, (x1 + w) as usize, (y1 + h) as usize),
            });
        }
        images.push(EvalImage { id: idx as usize, gts, dets });
    }
    images
}

/// Converts library fixtures to the raw-array form the naive evaluator uses.
pub fn to_naive(images: &[EvalImage]) -> (Vec<Vec<naive::Gt>>, Vec<Vec<naive::Det>>) {
    let gts = images
        .iter()
        .map(|img| {
            img.gts
                .iter()
                .map(|g| naive::Gt {
                    class: g.class,
                    bx: [g.bbox.x1, g.bbox.y1, g.bbox.x2, g.bbox.y2],
                    px: g.mask.data.iter().map(|&v| v != 0).collect(),
                })
                .collect()
        })
        .collect();
    let dts = images
        .iter()
        .map(|img| {
            img.dets
                .iter()
                .map(|d| naive::Det {
                    class: d.class,
                    score: d.score,
                    bx: [d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2],
                    px: d.mask.data.iter().map(|&v| v != 0).collect(),
                })
                .collect()
        })
        .collect();
    (gts, dts)
}

pub mod naive {
    //! A second evaluator written directly from the metric definitions, on
    //! raw arrays, sharing no code with the library implementation.

    pub struct Det {
        pub class: usize,
        pub score: f64,
        pub bx: [f64; 4],
        pub px: Vec<bool>,
    }
    pub struct Gt {
        pub class: usize,
        pub bx: [f64; 4],
        pub px: Vec<bool>,
    }

    fn box_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
        let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
        let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
        let inter = iw * ih;
        let ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
        if ua <= 0.0 {
            0.0
        } else {
            inter / ua
        }
    }

    fn pixel_iou(a: &[bool], b: &[bool]) -> f64 {
        let mut inter = 0.0;
        let mut union = 0.0;
        for i in 0..a.len() {
            if a[i] && b[i] {
                inter += 1.0;
            }
            if a[i] || b[i] {
                union += 1.0;
            }
        }
        if union == 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    fn in_bucket(area: f64, bucket: usize) -> bool {
        match bucket {
            0 => true,
            1 => area < 1024.0,
            2 => area >= 1024.0 && area <= 9216.0,
            _ => area > 9216.0,
        }
    }

    /// (score, image, rank, matched gt area) rows for one class at one
    /// threshold with a per-image cap, ordered like the global PR walk.
    fn matched_rows(
        gts: &[Vec<Gt>],
        dts: &[Vec<Det>],
        class: usize,
        use_mask: bool,
        thresh: f64,
        cap: usize,
    ) -> Vec<(f64, Option<f64>)> {
        let mut rows: Vec<(f64, usize, usize, Option<f64>)> = Vec::new();
        for img in 0..gts.len() {
            let mut ds: Vec<&Det> = dts[img].iter().filter(|d| d.class == class).collect();
            ds.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
            ds.truncate(cap);
            let gs: Vec<&Gt> = gts[img].iter().filter(|g| g.class == class).collect();
            let mut free = vec![true; gs.len()];
            for (rank, d) in ds.iter().enumerate() {
                let mut choice = None;
                for (gi, g) in gs.iter().enumerate() {
                    if !free[gi] {
                        continue;
                    }
                    let v = if use_mask { pixel_iou(&d.px, &g.px) } else { box_iou(&d.bx, &g.bx) };
                    if v >= thresh {
                        let better = match choice {
                            None => true,
                            Some((_, bv)) => v > bv,
                        };
                        if better {
                            choice = Some((gi, v));
                        }
                    }
                }
                let area = choice.map(|(gi, _)| {
                    free[gi] = false;
                    gs[gi].px.iter().filter(|&&p| p).count() as f64
                });
                rows.push((d.score, img, rank, area));
            }
        }
        rows.sort_by(|a, b| {
            b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
        });
        rows.into_iter().map(|(s, _, _, m)| (s, m)).collect()
    }

    fn class_gt_count(gts: &[Vec<Gt>], class: usize, bucket: usize) -> usize {
        gts.iter()
            .flatten()
            .filter(|g| g.class == class)
            .filter(|g| in_bucket(g.px.iter().filter(|&&p| p).count() as f64, bucket))
            .count()
    }

    fn ap_one(gts: &[Vec<Gt>], dts: &[Vec<Det>], class: usize, use_mask: bool, thresh: f64, bucket: usize) -> f64 {
        let n_gts = class_gt_count(gts, class, bucket);
        let mut pr: Vec<(f64, f64)> = Vec::new();
        let (mut tp, mut fp) = (0.0, 0.0);
        for (_, m) in matched_rows(gts, dts, class, use_mask, thresh, 100) {
            match m {
                Some(a) if in_bucket(a, bucket) => tp += 1.0,
                Some(_) => continue,
                None => fp += 1.0,
            }
            pr.push((tp / n_gts as f64, tp / (tp + fp)));
        }
        let mut total = 0.0;
        for i in 0..=100 {
            let r = i as f64 / 100.0;
            let mut best = 0.0f64;
            for &(rec, p) in &pr {
                if rec >= r && p > best {
                    best = p;
                }
            }
            total += best;
        }
        total / 101.0
    }

    fn recall_one(gts: &[Vec<Gt>], dts: &[Vec<Det>], class: usize, use_mask: bool, thresh: f64, cap: usize, bucket: usize) -> f64 {
        let n_gts = class_gt_count(gts, class, bucket);
        let tp = matched_rows(gts, dts, class, use_mask, thresh, cap)
            .iter()
            .filter(|(_, m)| matches!(m, Some(a) if in_bucket(*a, bucket)))
            .count();
        tp as f64 / n_gts as f64
    }

    /// AP, AP50, AP75, AP_S/M/L, AR_1/10/100, AR_S/M/L.
    pub fn metrics(gts: &[Vec<Gt>], dts: &[Vec<Det>], classes: usize, use_mask: bool) -> [Option<f64>; 12] {
        let threshs: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
        let mean = |vals: Vec<f64>| -> Option<f64> {
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        };
        let ap_bucket = |bucket: usize, ts: &[f64]| -> Option<f64> {
            let mut per = Vec::new();
            for c in 0..classes {
                if class_gt_count(gts, c, bucket) == 0 {
                    continue;
                }
                let s: f64 = ts.iter().map(|&t| ap_one(gts, dts, c, use_mask, t, bucket)).sum();
                per.push(s / ts.len() as f64);
            }
            mean(per)
        };
        let ar_bucket = |bucket: usize, cap: usize| -> Option<f64> {
            let mut per = Vec::new();
            for c in 0..classes {
                if class_gt_count(gts, c, bucket) == 0 {
                    continue;
                }
                let s: f64 = threshs
                    .iter()
                    .map(|&t| recall_one(gts, dts, c, use_mask, t, cap, bucket))
                    .sum();
                per.push(s / threshs.len() as f64);
            }
            mean(per)
        };
        [
            ap_bucket(0, &threshs),
            ap_bucket(0, &threshs[..1]),
            ap_bucket(0, &threshs[5..6]),
            ap_bucket(1, &threshs),
            ap_bucket(2, &threshs),
            ap_bucket(3, &threshs),
            ar_bucket(0, 1),
            ar_bucket(0, 10),
            ar_bucket(0, 100),
            ar_bucket(1, 100),
            ar_bucket(2, 100),
            ar_bucket(3, 100),
        ]
    }
}
