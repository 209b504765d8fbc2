//! Synthetic scene generator: anti-aliased discs, rectangles, and triangles
//! on a noise background, with exact per-instance visibility masks.

use crate::data::ppm::Image;
use crate::error::{Result, SprError};
use crate::geom::{BBox, Mask};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const CLASS_NAMES: [&str; 3] = ["disc", "rectangle", "triangle"];
const SUPERSAMPLE: usize = 4;
const PLACEMENT_RETRIES: usize = 40;
const MIN_VISIBLE_PIXELS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Disc { cx: f64, cy: f64, r: f64 },
    Rect { cx: f64, cy: f64, hw: f64, hh: f64 },
    Tri { cx: f64, cy: f64, hw: f64, hh: f64 },
}

impl Shape {
    pub fn class(&self) -> usize {
        match self {
            Shape::Disc { .. } => 0,
            Shape::Rect { .. } => 1,
            Shape::Tri { .. } => 2,
        }
    }

    /// Ideal (pre-occlusion) bounds.
    pub fn bounds(&self) -> BBox {
        match *self {
            Shape::Disc { cx, cy, r } => BBox::new(cx - r, cy - r, cx + r, cy + r),
            Shape::Rect { cx, cy, hw, hh } | Shape::Tri { cx, cy, hw, hh } => {
                BBox::new(cx - hw, cy - hh, cx + hw, cy + hh)
            }
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disc { cx, cy, r } => {
                let (dx, dy) = (x - cx, y - cy);
                dx * dx + dy * dy <= r * r
            }
            Shape::Rect { cx, cy, hw, hh } => (x - cx).abs() <= hw && (y - cy).abs() <= hh,
            Shape::Tri { cx, cy, hw, hh } => {
                // Isoceles, apex up: width grows linearly from apex to base.
                let (dx, dy) = (x - cx, y - cy);
                dy >= -hh && dy <= hh && dx.abs() * 2.0 * hh <= (dy + hh) * hw
            }
        }
    }

    /// Fraction of the pixel (x, y)..(x+1, y+1) covered, on a 4x4 subgrid.
    fn coverage(&self, x: usize, y: usize) -> f64 {
        let mut hits = 0usize;
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                if self.contains(px, py) {
                    hits += 1;
                }
            }
        }
        hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
    }
}

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub seed: u64,
    pub image_size: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Full shape extent (diameter, side, base) in pixels.
    pub size_range: (f64, f64),
    /// Pairwise bound on ideal-bounds IoU between placed instances.
    pub max_overlap: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 7,
            image_size: 128,
            min_instances: 1,
            max_instances: 3,
            size_range: (16.0, 56.0),
            max_overlap: 0.3,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(SprError::Config("image size below 32".into()));
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return Err(SprError::Config("instance range is empty".into()));
        }
        let (lo, hi) = self.size_range;
        if !(lo > 4.0 && hi >= lo && hi <= self.image_size as f64) {
            return Err(SprError::Config("size range out of bounds".into()));
        }
        if !(0.0..1.0).contains(&self.max_overlap) {
            return Err(SprError::Config("overlap allowance must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub class: usize,
    pub bbox: BBox,
    pub mask: Mask,
    pub shape: Shape,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub image: Image,
    pub instances: Vec<Instance>,
    /// Instances the spec asked for before placement retries gave up.
    pub planned: usize,
}

fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&index.to_le_bytes());
    key[16..24].copy_from_slice(&(seed ^ 0x9e37_79b9_7f4a_7c15).to_le_bytes());
    key[24..].copy_from_slice(&(index ^ 0xd1b5_4a32_d192_ed03).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

fn sample_shape(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> Shape {
    let (lo, hi) = spec.size_range;
    let s = spec.image_size as f64;
    let kind = rng.random_range(0..3usize);
    let place = |rng: &mut ChaCha8Rng, ex: f64, ey: f64| {
        let cx = rng.random_range(ex + 2.0..s - ex - 2.0);
        let cy = rng.random_range(ey + 2.0..s - ey - 2.0);
        (cx, cy)
    };
    match kind {
        0 => {
            let r = rng.random_range(lo..hi) / 2.0;
            let (cx, cy) = place(rng, r, r);
            Shape::Disc { cx, cy, r }
        }
        1 => {
            let w = rng.random_range(lo..hi);
            let h = (w * rng.random_range(0.6..1.6)).clamp(lo, hi);
            let (cx, cy) = place(rng, w / 2.0, h / 2.0);
            Shape::Rect { cx, cy, hw: w / 2.0, hh: h / 2.0 }
        }
        _ => {
            let base = rng.random_range(lo..hi);
            let height = (base * rng.random_range(0.7..1.4)).clamp(lo, hi);
            let (cx, cy) = place(rng, base / 2.0, height / 2.0);
            Shape::Tri { cx, cy, hw: base / 2.0, hh: height / 2.0 }
        }
    }
}

fn placement_ok(candidate: &Shape, placed: &[Shape], max_overlap: f64) -> bool {
    let cb = candidate.bounds();
    placed.iter().all(|p| {
        let pb = p.bounds();
        let inter_iou = cb.iou(&pb);
        let inter = inter_iou * (cb.area() + pb.area()) / (1.0 + inter_iou);
        // Bound both mutual IoU and the covered fraction of the smaller box,
        // so a small shape can never vanish inside a big one.
        inter_iou <= max_overlap && inter <= 0.5 * cb.area().min(pb.area())
    })
}

/// Renders shapes over the background and returns the visible mask of each:
/// own coverage >= 0.5 and not claimed by a later-drawn instance.
fn render(image: &mut Image, shapes: &[(Shape, [u8; 3])], size: usize) -> Vec<Mask> {
    let mut masks: Vec<Mask> = shapes.iter().map(|_| Mask::zeros(size, size)).collect();
    for y in 0..size {
        for x in 0..size {
            let mut rgb = image.pixel(y, x).map(|v| v as f64);
            let mut owner: Option<usize> = None;
            for (i, (shape, color)) in shapes.iter().enumerate() {
                let b = shape.bounds();
                if (x as f64) + 1.0 < b.x1 || (x as f64) > b.x2 + 1.0 || (y as f64) + 1.0 < b.y1 || (y as f64) > b.y2 + 1.0 {
                    continue;
                }
                let cov = shape.coverage(x, y);
                if cov > 0.0 {
                    for c in 0..3 {
                        rgb[c] = rgb[c] * (1.0 - cov) + color[c] as f64 * cov;
                    }
                }
                if cov >= 0.5 {
                    owner = Some(i);
                }
            }
            if let Some(i) = owner {
                masks[i].set(y, x, 1);
            }
            image.set_pixel(y, x, [rgb[0] as u8, rgb[1] as u8, rgb[2] as u8]);
        }
    }
    masks
}

fn background(rng: &mut ChaCha8Rng, size: usize) -> Image {
    let mut img = Image::new(size, size);
    let base: [f64; 3] = [rng.random_range(25.0..55.0), rng.random_range(25.0..55.0), rng.random_range(25.0..55.0)];
    for y in 0..size {
        for x in 0..size {
            let px = std::array::from_fn(|c| (base[c] + rng.random_range(-12.0..12.0)).clamp(0.0, 255.0) as u8);
            img.set_pixel(y, x, px);
        }
    }
    img
}

fn shape_color(rng: &mut ChaCha8Rng) -> [u8; 3] {
    // Bright, saturated-ish colors so shapes stand off the dark noise.
    std::array::from_fn(|_| rng.random_range(110..=255u16) as u8)
}

pub fn synth_scene(spec: &SceneSpec, index: u64) -> Result<Scene> {
    spec.validate()?;
    let size = spec.image_size;
    let mut rng = scene_rng(spec.seed, index);
    let planned = rng.random_range(spec.min_instances..=spec.max_instances);

    let bg = background(&mut rng, size);
    let mut shapes: Vec<Shape> = Vec::new();
    let mut colors: Vec<[u8; 3]> = Vec::new();
    for _ in 0..planned {
        let color = shape_color(&mut rng);
        for _ in 0..PLACEMENT_RETRIES {
            let cand = sample_shape(&mut rng, spec);
            if placement_ok(&cand, &shapes, spec.max_overlap) {
                shapes.push(cand);
                colors.push(color);
                break;
            }
        }
    }

    let paint: Vec<(Shape, [u8; 3])> = shapes.iter().copied().zip(colors.iter().copied()).collect();
    let mut image = bg.clone();
    let mut masks = render(&mut image, &paint, size);

    // An instance occluded down to a sliver is removed and the scene redrawn
    // without it; removal only grows the remaining masks.
    let keep: Vec<usize> =
        (0..paint.len()).filter(|&i| masks[i].count() >= MIN_VISIBLE_PIXELS).collect();
    if keep.len() != paint.len() {
        let paint: Vec<(Shape, [u8; 3])> = keep.iter().map(|&i| paint[i]).collect();
        image = bg;
        masks = render(&mut image, &paint, size);
        let instances = build_instances(&paint, masks)?;
        return Ok(Scene { image, instances, planned });
    }

    let instances = build_instances(&paint, masks)?;
    Ok(Scene { image, instances, planned })
}

fn build_instances(paint: &[(Shape, [u8; 3])], masks: Vec<Mask>) -> Result<Vec<Instance>> {
    paint
        .iter()
        .zip(masks)
        .map(|(&(shape, _), mask)| {
            let bbox = mask
                .tight_bbox()
                .ok_or_else(|| SprError::Data("kept instance has an empty mask".into()))?;
            Ok(Instance { class: shape.class(), bbox, mask, shape })
        })
        .collect()
}
