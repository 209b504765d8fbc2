//! COCO-protocol detection and segmentation metrics: AP over an IoU sweep
//! with 101-point interpolation, AR at capped detection counts, and area
//! buckets keyed on ground-truth mask area.

use crate::data::dataset::{Annotations, Sample};
use crate::data::rle;
use crate::error::{Result, SprError};
use crate::geom::{BBox, Mask};
use crate::infer::DetectionRec;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct EvalConfig {
    /// Ascending IoU thresholds the AP/AR sweep averages over.
    pub iou_thresholds: Vec<f64>,
    /// Recall grid resolution for interpolated precision.
    pub recall_points: usize,
    /// Per-image, per-class detection caps for the AR variants.
    pub max_dets: [usize; 3],
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
            recall_points: 101,
            max_dets: [1, 10, 100],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty()
            || self.iou_thresholds.windows(2).any(|w| w[0] >= w[1])
            || self.iou_thresholds.iter().any(|t| !(0.0..=1.0).contains(t))
        {
            return Err(SprError::Config("IoU thresholds must be ascending in [0, 1]".into()));
        }
        if self.recall_points < 2 {
            return Err(SprError::Config("recall grid needs at least 2 points".into()));
        }
        if self.max_dets.windows(2).any(|w| w[0] >= w[1]) || self.max_dets[0] == 0 {
            return Err(SprError::Config("detection caps must be positive and ascending".into()));
        }
        Ok(())
    }
}

/// Area buckets over ground-truth mask pixel counts: small below 32*32,
/// medium up to 96*96 inclusive, large above.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AreaBucket {
    All,
    Small,
    Medium,
    Large,
}

impl AreaBucket {
    pub fn contains(self, area: f64) -> bool {
        match self {
            AreaBucket::All => true,
            AreaBucket::Small => area < 1024.0,
            AreaBucket::Medium => (1024.0..=9216.0).contains(&area),
            AreaBucket::Large => area > 9216.0,
        }
    }
}

/// Which IoU the matcher uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IouKind {
    Box,
    Mask,
}

#[derive(Debug, Clone)]
pub struct GtInstance {
    pub class: usize,
    pub bbox: BBox,
    pub mask: Mask,
}

#[derive(Debug, Clone)]
pub struct EvalDet {
    pub class: usize,
    pub score: f64,
    pub bbox: BBox,
    pub mask: Mask,
}

#[derive(Debug, Clone)]
pub struct EvalImage {
    pub id: usize,
    pub gts: Vec<GtInstance>,
    pub dets: Vec<EvalDet>,
}

/// Joins dataset ground truth with serialized detections, decoding detection
/// masks onto each image's canvas.
pub fn build_eval_images(samples: &[Sample], recs: &[DetectionRec]) -> Result<Vec<EvalImage>> {
    let mut images: Vec<EvalImage> = samples
        .iter()
        .map(|s| EvalImage {
            id: s.id,
            gts: s
                .boxes
                .iter()
                .zip(&s.classes)
                .zip(&s.masks)
                .map(|((b, &c), m)| GtInstance { class: c, bbox: *b, mask: m.clone() })
                .collect(),
            dets: Vec::new(),
        })
        .collect();
    for r in recs {
        let img = images
            .iter_mut()
            .find(|i| i.id == r.image_id)
            .ok_or_else(|| SprError::Data(format!("detection references unknown image {}", r.image_id)))?;
        let s = samples.iter().find(|s| s.id == r.image_id).unwrap();
        let mask = rle::decode(&r.mask_rle, s.image.h, s.image.w)?;
        img.dets.push(EvalDet {
            class: r.class,
            score: r.score,
            bbox: BBox::new(r.bbox[0], r.bbox[1], r.bbox[2], r.bbox[3]),
            mask,
        });
    }
    Ok(images)
}

/// Builds eval images straight from annotation records: ground-truth masks
/// decode from RLE onto each image's recorded canvas, no pixel data needed.
pub fn eval_images_from_annotations(ann: &Annotations, recs: &[DetectionRec]) -> Result<Vec<EvalImage>> {
    let mut images: Vec<EvalImage> = ann
        .images
        .iter()
        .map(|i| EvalImage { id: i.id, gts: Vec::new(), dets: Vec::new() })
        .collect();
    let dims = |id: usize| -> Result<(usize, usize)> {
        ann.images
            .iter()
            .find(|i| i.id == id)
            .map(|i| (i.height, i.width))
            .ok_or_else(|| SprError::Data(format!("unknown image id {id}")))
    };
    for inst in &ann.instances {
        let (h, w) = dims(inst.image_id)?;
        let mask = rle::decode(&inst.mask_rle, h, w)?;
        let img = images.iter_mut().find(|i| i.id == inst.image_id).unwrap();
        img.gts.push(GtInstance {
            class: inst.class,
            bbox: BBox::new(inst.bbox[0], inst.bbox[1], inst.bbox[2], inst.bbox[3]),
            mask,
        });
    }
    for r in recs {
        let (h, w) = dims(r.image_id)
            .map_err(|_| SprError::Data(format!("detection references unknown image {}", r.image_id)))?;
        let mask = rle::decode(&r.mask_rle, h, w)?;
        let img = images.iter_mut().find(|i| i.id == r.image_id).unwrap();
        img.dets.push(EvalDet {
            class: r.class,
            score: r.score,
            bbox: BBox::new(r.bbox[0], r.bbox[1], r.bbox[2], r.bbox[3]),
            mask,
        });
    }
    Ok(images)
}

/// Greedy one-to-one matching for one image and class. `dets` must be sorted
/// by descending score; each detection takes the unmatched ground truth of
/// highest IoU at or above `thresh`, lowest index on ties. Returns the
/// matched gt index per detection.
pub fn match_detections(iou: &[Vec<f64>], n_gts: usize, thresh: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; n_gts];
    iou.iter()
        .map(|row| {
            let mut best: Option<usize> = None;
            for g in 0..n_gts {
                if taken[g] || row[g] < thresh {
                    continue;
                }
                if best.map_or(true, |b| row[g] > row[b]) {
                    best = Some(g);
                }
            }
            if let Some(g) = best {
                taken[g] = true;
            }
            best
        })
        .collect()
}

/// Interpolated average precision: mean over an even recall grid of the
/// maximum precision at or beyond each recall level.
pub fn average_precision(flags: &[bool], n_gts: usize, recall_points: usize) -> Option<f64> {
    if n_gts == 0 {
        return None;
    }
    let mut curve = Vec::with_capacity(flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &is_tp in flags {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        curve.push((tp as f64 / n_gts as f64, tp as f64 / (tp + fp) as f64));
    }
    let last = (recall_points - 1) as f64;
    let mut sum = 0.0;
    for i in 0..recall_points {
        let r = i as f64 / last;
        let best = curve
            .iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0f64, f64::max);
        sum += best;
    }
    Some(sum / recall_points as f64)
}

/// One detection class pooled across the dataset for a fixed IoU kind:
/// per-image IoU tables plus the global score ordering.
struct ClassPool {
    /// Per image: (sorted det scores, iou[det][gt], in-bucket area per gt).
    per_image: Vec<PerImage>,
}

struct PerImage {
    scores: Vec<f64>,
    iou: Vec<Vec<f64>>,
    gt_areas: Vec<f64>,
}

fn pool_class(images: &[EvalImage], class: usize, kind: IouKind) -> Result<ClassPool> {
    let mut per_image = Vec::with_capacity(images.len());
    for img in images {
        let mut dets: Vec<&EvalDet> = img.dets.iter().filter(|d| d.class == class).collect();
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        let gts: Vec<&GtInstance> = img.gts.iter().filter(|g| g.class == class).collect();
        let mut iou = Vec::with_capacity(dets.len());
        for d in &dets {
            let mut row = Vec::with_capacity(gts.len());
            for g in &gts {
                let v = match kind {
                    IouKind::Box => d.bbox.iou(&g.bbox),
                    IouKind::Mask => d.mask.iou(&g.mask).ok_or_else(|| {
                        SprError::Data(format!("mask size mismatch in image {}", img.id))
                    })?,
                };
                row.push(v);
            }
            iou.push(row);
        }
        per_image.push(PerImage {
            scores: dets.iter().map(|d| d.score).collect(),
            iou,
            gt_areas: gts.iter().map(|g| g.mask.count() as f64).collect(),
        });
    }
    Ok(ClassPool { per_image })
}

impl ClassPool {
    fn gt_count(&self, bucket: AreaBucket) -> usize {
        self.per_image
            .iter()
            .flat_map(|pi| &pi.gt_areas)
            .filter(|&&a| bucket.contains(a))
            .count()
    }

    /// Dataset-wide TP/FP flags at one threshold and bucket, capped per image,
    /// ordered by descending score with (image, rank) breaking ties.
    /// Detections matched to an out-of-bucket gt are dropped; unmatched
    /// detections count as false positives in every bucket.
    fn flags(&self, thresh: f64, max_det: usize, bucket: AreaBucket) -> Vec<bool> {
        let mut rows: Vec<(f64, usize, usize, Option<f64>)> = Vec::new();
        for (ii, pi) in self.per_image.iter().enumerate() {
            let n = pi.scores.len().min(max_det);
            let matches = match_detections(&pi.iou[..n], pi.gt_areas.len(), thresh);
            for (di, m) in matches.iter().enumerate() {
                rows.push((pi.scores[di], ii, di, m.map(|g| pi.gt_areas[g])));
            }
        }
        rows.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        rows.iter()
            .filter_map(|(_, _, _, m)| match m {
                Some(area) if bucket.contains(*area) => Some(true),
                Some(_) => None,
                None => Some(false),
            })
            .collect()
    }

    /// Fraction of in-bucket gts recovered with at most `max_det` detections
    /// per image at one threshold.
    fn recall(&self, thresh: f64, max_det: usize, bucket: AreaBucket) -> Option<f64> {
        let n_gts = self.gt_count(bucket);
        if n_gts == 0 {
            return None;
        }
        let mut tp = 0usize;
        for pi in &self.per_image {
            let n = pi.scores.len().min(max_det);
            for m in match_detections(&pi.iou[..n], pi.gt_areas.len(), thresh).into_iter().flatten() {
                if bucket.contains(pi.gt_areas[m]) {
                    tp += 1;
                }
            }
        }
        Some(tp as f64 / n_gts as f64)
    }
}

/// All metrics for one IoU kind. Fields are None when no class has ground
/// truth in the relevant bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindMetrics {
    #[serde(rename = "AP")]
    pub ap: Option<f64>,
    #[serde(rename = "AP50")]
    pub ap50: Option<f64>,
    #[serde(rename = "AP75")]
    pub ap75: Option<f64>,
    #[serde(rename = "AP_S")]
    pub ap_small: Option<f64>,
    #[serde(rename = "AP_M")]
    pub ap_medium: Option<f64>,
    #[serde(rename = "AP_L")]
    pub ap_large: Option<f64>,
    #[serde(rename = "AR_1")]
    pub ar_1: Option<f64>,
    #[serde(rename = "AR_10")]
    pub ar_10: Option<f64>,
    #[serde(rename = "AR_100")]
    pub ar_100: Option<f64>,
    #[serde(rename = "AR_S")]
    pub ar_small: Option<f64>,
    #[serde(rename = "AR_M")]
    pub ar_medium: Option<f64>,
    #[serde(rename = "AR_L")]
    pub ar_large: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    #[serde(rename = "box")]
    pub box_metrics: KindMetrics,
    #[serde(rename = "mask")]
    pub mask_metrics: KindMetrics,
}

fn mean_of(vals: Vec<f64>) -> Option<f64> {
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

fn kind_metrics(images: &[EvalImage], classes: usize, kind: IouKind, cfg: &EvalConfig) -> Result<KindMetrics> {
    let pools: Vec<ClassPool> = (0..classes)
        .map(|c| pool_class(images, c, kind))
        .collect::<Result<_>>()?;
    let cap = *cfg.max_dets.last().unwrap();

    let ap_at = |bucket: AreaBucket, threshs: &[f64]| -> Option<f64> {
        let mut per_class = Vec::new();
        for pool in &pools {
            let n_gts = pool.gt_count(bucket);
            if n_gts == 0 {
                continue;
            }
            let mut acc = 0.0;
            for &t in threshs {
                let flags = pool.flags(t, cap, bucket);
                acc += average_precision(&flags, n_gts, cfg.recall_points).unwrap();
            }
            per_class.push(acc / threshs.len() as f64);
        }
        mean_of(per_class)
    };
    let ar_at = |bucket: AreaBucket, max_det: usize| -> Option<f64> {
        let mut per_class = Vec::new();
        for pool in &pools {
            if pool.gt_count(bucket) == 0 {
                continue;
            }
            let acc: f64 = cfg
                .iou_thresholds
                .iter()
                .map(|&t| pool.recall(t, max_det, bucket).unwrap())
                .sum();
            per_class.push(acc / cfg.iou_thresholds.len() as f64);
        }
        mean_of(per_class)
    };

    let all = &cfg.iou_thresholds;
    let t50 = [all[0]];
    let t75 = [all[all.len() / 2]];
    Ok(KindMetrics {
        ap: ap_at(AreaBucket::All, all),
        ap50: ap_at(AreaBucket::All, &t50),
        ap75: ap_at(AreaBucket::All, &t75),
        ap_small: ap_at(AreaBucket::Small, all),
        ap_medium: ap_at(AreaBucket::Medium, all),
        ap_large: ap_at(AreaBucket::Large, all),
        ar_1: ar_at(AreaBucket::All, cfg.max_dets[0]),
        ar_10: ar_at(AreaBucket::All, cfg.max_dets[1]),
        ar_100: ar_at(AreaBucket::All, cfg.max_dets[2]),
        ar_small: ar_at(AreaBucket::Small, cap),
        ar_medium: ar_at(AreaBucket::Medium, cap),
        ar_large: ar_at(AreaBucket::Large, cap),
    })
}

/// Evaluates boxes and masks over the whole dataset.
pub fn summarize(images: &[EvalImage], classes: usize, cfg: &EvalConfig) -> Result<EvalResult> {
    cfg.validate()?;
    Ok(EvalResult {
        box_metrics: kind_metrics(images, classes, IouKind::Box, cfg)?,
        mask_metrics: kind_metrics(images, classes, IouKind::Mask, cfg)?,
    })
}

/// Interpolated PR curve for one class at the lowest IoU threshold, full
/// detection cap, all areas: (recall grid point, precision) pairs.
pub fn pr_curve(
    images: &[EvalImage],
    class: usize,
    kind: IouKind,
    cfg: &EvalConfig,
) -> Result<Vec<(f64, f64)>> {
    let pool = pool_class(images, class, kind)?;
    let n_gts = pool.gt_count(AreaBucket::All);
    let cap = *cfg.max_dets.last().unwrap();
    let flags = pool.flags(cfg.iou_thresholds[0], cap, AreaBucket::All);
    let mut curve = Vec::with_capacity(flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for f in &flags {
        if *f {
            tp += 1;
        } else {
            fp += 1;
        }
        let r = if n_gts == 0 { 0.0 } else { tp as f64 / n_gts as f64 };
        curve.push((r, tp as f64 / (tp + fp) as f64));
    }
    let last = (cfg.recall_points - 1) as f64;
    Ok((0..cfg.recall_points)
        .map(|i| {
            let r = i as f64 / last;
            let best = curve
                .iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|(_, p)| *p)
                .fold(0.0f64, f64::max);
            (r, best)
        })
        .collect())
}

/// Writes the per-class PR curves for both kinds as CSV.
pub fn write_pr_csv(path: &Path, images: &[EvalImage], classes: usize, cfg: &EvalConfig) -> Result<()> {
    let mut out = String::from("kind,class,recall,precision\n");
    for (kind, name) in [(IouKind::Box, "box"), (IouKind::Mask, "mask")] {
        for c in 0..classes {
            for (r, p) in pr_curve(images, c, kind, cfg)? {
                out.push_str(&format!("{name},{c},{r:.6},{p:.6}\n"));
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_eval_result(path: &Path, result: &EvalResult) -> Result<()> {
    let mut text = serde_json::to_string_pretty(result)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_eval_result(path: &Path) -> Result<EvalResult> {
    let text = fs::read_to_string(path)
        .map_err(|e| SprError::Data(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)
        .map_err(|e| SprError::Data(format!("{}: {e}", path.display())))?)
}
