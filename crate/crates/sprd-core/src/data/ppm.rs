//! Binary PPM (P6) image IO, the only image codec this crate speaks.

use crate::error::{Result, SprError};
use crate::num::Element;
use crate::tensor::Tensor;
use std::fs;
use std::io::Write;
use std::path::Path;

/// Interleaved 8-bit RGB.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub w: usize,
    pub h: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(w: usize, h: usize) -> Self {
        Image { w, h, data: vec![0; w * h * 3] }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.w + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.w + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// [1, 3, h, w] network input, channels scaled to [-1, 1].
    pub fn to_input<E: Element>(&self) -> Tensor<E> {
        let mut t = Tensor::zeros([1, 3, self.h, self.w]);
        for y in 0..self.h {
            for x in 0..self.w {
                let px = self.pixel(y, x);
                for c in 0..3 {
                    *t.at_mut(0, c, y, x) = E::from_f64(px[c] as f64 / 127.5 - 1.0);
                }
            }
        }
        t
    }
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    if img.data.len() != img.w * img.h * 3 {
        return Err(SprError::bad_arg("write_ppm", "pixel buffer does not match dimensions"));
    }
    let mut f = fs::File::create(path)?;
    write!(f, "P6\n{} {}\n255\n", img.w, img.h)?;
    f.write_all(&img.data)?;
    Ok(())
}

/// Next whitespace-delimited header token, skipping # comments.
fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(SprError::bad_arg("read_ppm", "truncated header"));
    }
    Ok(&bytes[start..*pos])
}

fn header_int(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = header_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| SprError::bad_arg("read_ppm", format!("bad {what}")))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    let bad = |msg: &str| SprError::bad_arg("read_ppm", format!("{}: {msg}", path.display()));

    let mut pos = 0usize;
    if header_token(&bytes, &mut pos)? != b"P6" {
        return Err(bad("not a P6 file"));
    }
    let w = header_int(&bytes, &mut pos, "width")?;
    let h = header_int(&bytes, &mut pos, "height")?;
    if header_int(&bytes, &mut pos, "maxval")? != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(bad("truncated pixel data"));
    }
    Ok(Image { w, h, data: bytes[pos..pos + need].to_vec() })
}
