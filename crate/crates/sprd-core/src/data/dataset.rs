//! On-disk dataset layout: a directory of PPM images plus one annotations
//! JSON with images[] and instances[].

use crate::data::ppm::{read_ppm, write_ppm, Image};
use crate::data::rle;
use crate::data::synth::Scene;
use crate::error::{Result, SprError};
use crate::geom::{BBox, Mask};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const ANNOTATIONS_FILE: &str = "annotations.json";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ImageRec {
    pub id: usize,
    pub file: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InstanceRec {
    pub image_id: usize,
    pub class: usize,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub mask_rle: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct Annotations {
    pub images: Vec<ImageRec>,
    pub instances: Vec<InstanceRec>,
}

/// One image with its decoded ground truth, ready for training or eval.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: usize,
    pub image: Image,
    pub boxes: Vec<BBox>,
    pub classes: Vec<usize>,
    pub masks: Vec<Mask>,
}

pub fn image_file_name(id: usize) -> String {
    format!("img_{id:06}.ppm")
}

pub fn write_annotations(path: &Path, anns: &Annotations) -> Result<()> {
    let mut text = serde_json::to_string_pretty(anns)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_annotations(path: &Path) -> Result<Annotations> {
    let text = fs::read_to_string(path)
        .map_err(|e| SprError::Data(format!("{}: {e}", path.display())))?;
    let anns: Annotations = serde_json::from_str(&text)
        .map_err(|e| SprError::Data(format!("{}: {e}", path.display())))?;
    Ok(anns)
}

pub fn write_dataset(dir: &Path, scenes: &[Scene]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut anns = Annotations::default();
    for (id, scene) in scenes.iter().enumerate() {
        let file = image_file_name(id);
        write_ppm(&dir.join(&file), &scene.image)?;
        anns.images.push(ImageRec {
            id,
            file,
            width: scene.image.w,
            height: scene.image.h,
        });
        for inst in &scene.instances {
            let b = inst.bbox;
            anns.instances.push(InstanceRec {
                image_id: id,
                class: inst.class,
                bbox: [b.x1, b.y1, b.x2, b.y2],
                mask_rle: rle::encode(&inst.mask),
            });
        }
    }
    write_annotations(&dir.join(ANNOTATIONS_FILE), &anns)
}

/// Loads every image with its instances, validating each RLE against the
/// image bounds.
pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let anns = read_annotations(&dir.join(ANNOTATIONS_FILE))?;
    let mut samples: Vec<Sample> = Vec::with_capacity(anns.images.len());
    for rec in &anns.images {
        let image = read_ppm(&dir.join(&rec.file))?;
        if image.w != rec.width || image.h != rec.height {
            return Err(SprError::Data(format!(
                "{}: header says {}x{}, annotations say {}x{}",
                rec.file, image.w, image.h, rec.width, rec.height
            )));
        }
        samples.push(Sample { id: rec.id, image, boxes: vec![], classes: vec![], masks: vec![] });
    }
    for (i, inst) in anns.instances.iter().enumerate() {
        let idx = samples
            .iter()
            .position(|s| s.id == inst.image_id)
            .ok_or_else(|| SprError::Data(format!("instance {i}: unknown image_id {}", inst.image_id)))?;
        let (h, w) = (samples[idx].image.h, samples[idx].image.w);
        let mask = rle::decode(&inst.mask_rle, h, w)
            .map_err(|e| SprError::Data(format!("instance {i}: {e}")))?;
        let [x1, y1, x2, y2] = inst.bbox;
        let b = BBox::new(x1, y1, x2, y2);
        if !b.is_valid() {
            return Err(SprError::Data(format!("instance {i}: degenerate box {:?}", inst.bbox)));
        }
        samples[idx].boxes.push(b);
        samples[idx].classes.push(inst.class);
        samples[idx].masks.push(mask);
    }
    Ok(samples)
}
