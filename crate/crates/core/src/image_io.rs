//! Binary PPM/PGM and raw `TEN1` tensor files.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageFormat};

use crate::error::{Error, Result};
use crate::tensor::{Array4, Shape4};

/// Decodes a `TEN1`, P5 or P6 file into `1×C×H×W` (tensors of rank 4 keep their batch).
/// Pixel values are scaled to [0, 1].
pub fn decode_image(bytes: &[u8]) -> Result<Array4> {
    if bytes.starts_with(b"TEN1") {
        return decode_tensor(bytes);
    }
    if !(bytes.starts_with(b"P5") || bytes.starts_with(b"P6")) {
        return Err(Error::Format("expected a TEN1, P5 or P6 file".into()));
    }
    let img = image::load(Cursor::new(bytes), ImageFormat::Pnm).map_err(|e| Error::Format(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, raw): (usize, Vec<u8>) = match img {
        DynamicImage::ImageLuma8(g) => (1, g.into_raw()),
        other => (3, other.into_rgb8().into_raw()),
    };
    Ok(Array4::from_fn(Shape4::new(1, channels, h, w), |_, c, y, x| {
        raw[(y * w + x) * channels + c] as f32 / 255.0
    }))
}

pub fn read_image(path: &Path) -> Result<Array4> {
    decode_image(&std::fs::read(path)?)
}

/// Grey images become three equal channels.
pub fn to_rgb(img: Array4) -> Result<Array4> {
    let s = img.shape();
    match s.c {
        3 => Ok(img),
        1 => Ok(Array4::from_fn(Shape4::new(s.n, 3, s.h, s.w), |n, _, y, x| img.get(n, 0, y, x))),
        c => Err(Error::Format(format!("expected 1 or 3 channels, found {c}"))),
    }
}

/// Binary PPM (3 channels) or PGM (1 channel) of the first image, values clamped to [0, 1].
pub fn encode_pnm(img: &Array4) -> Result<Vec<u8>> {
    let s = img.shape();
    let (magic, c) = match s.c {
        1 => ("P5", 1),
        3 => ("P6", 3),
        other => return Err(Error::Format(format!("cannot write {other} channels as PNM"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", s.w, s.h).into_bytes();
    for y in 0..s.h {
        for x in 0..s.w {
            for ch in 0..c {
                out.push((img.get(0, ch, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn encode_tensor(a: &Array4) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(21 + a.len() * 4);
    a.write_ten1(&mut out)?;
    Ok(out)
}

/// Whole-buffer `TEN1` decode; trailing bytes are an error.
pub fn decode_tensor(bytes: &[u8]) -> Result<Array4> {
    let mut cursor = Cursor::new(bytes);
    let a = Array4::read_ten1(&mut cursor)?;
    if cursor.position() as usize != bytes.len() {
        return Err(Error::Format("TEN1: trailing bytes after tensor data".into()));
    }
    Ok(a)
}
