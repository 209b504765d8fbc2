//! Uncompressed run-length coding of binary masks: row-major alternating run
//! counts, always starting with the zero run (which may be 0).

use crate::error::{Result, SprError};
use crate::geom::Mask;

/// Canonical encoding: no zero-length runs after the first entry, no trailing
/// empty run. An all-zero mask is `[h*w]`; an all-ones mask is `[0, h*w]`.
pub fn encode(mask: &Mask) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = 0u8;
    let mut count = 0u32;
    for &v in &mask.data {
        let bit = (v != 0) as u8;
        if bit == current {
            count += 1;
        } else {
            runs.push(count);
            current = bit;
            count = 1;
        }
    }
    runs.push(count);
    runs
}

pub fn decode(runs: &[u32], h: usize, w: usize) -> Result<Mask> {
    if runs.is_empty() {
        return Err(SprError::bad_arg("rle::decode", "empty run list"));
    }
    if runs.iter().skip(1).any(|&r| r == 0) {
        return Err(SprError::bad_arg("rle::decode", "zero-length run after the first entry"));
    }
    let total: u64 = runs.iter().map(|&r| r as u64).sum();
    if total != (h * w) as u64 {
        return Err(SprError::bad_arg(
            "rle::decode",
            format!("runs cover {total} pixels, mask is {h}x{w} = {}", h * w),
        ));
    }
    let mut mask = Mask::zeros(h, w);
    let mut pos = 0usize;
    for (i, &r) in runs.iter().enumerate() {
        let val = (i % 2 == 1) as u8;
        if val == 1 {
            mask.data[pos..pos + r as usize].fill(1);
        }
        pos += r as usize;
    }
    Ok(mask)
}
