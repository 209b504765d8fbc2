//! Dataset plumbing: RLE masks, PPM images, synthetic scenes, disk layout.

pub mod dataset;
pub mod ppm;
pub mod rle;
pub mod synth;
