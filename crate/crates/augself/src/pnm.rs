//! Binary PGM/PPM writers for augmentation previews.
//!
//! Pixel values in [-1, 1] map to bytes via round((v + 1) * 127.5), clamped
//! to [0, 255]. Single-channel images become P5 (PGM), three-channel images
//! P6 (PPM).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Map one pixel value into a display byte.
pub fn to_byte(v: f64) -> u8 {
    let scaled = ((v + 1.0) * 127.5).round();
    scaled.clamp(0.0, 255.0) as u8
}

fn image_dims(img: &Tensor) -> Result<(usize, usize, usize)> {
    let shape = img.shape();
    let (c, h, w) = match shape.len() {
        3 => (shape[0], shape[1], shape[2]),
        4 if shape[0] == 1 => (shape[1], shape[2], shape[3]),
        _ => {
            return Err(Error::Shape(format!(
                "image writer needs [C,H,W] or [1,C,H,W], got {:?}",
                shape
            )))
        }
    };
    if c != 1 && c != 3 {
        return Err(Error::Shape(format!(
            "image writer supports 1 or 3 channels, got {}",
            c
        )));
    }
    Ok((c, h, w))
}

/// Encode an image tensor as a binary PGM (1 channel) or PPM (3 channels).
pub fn encode(img: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image_dims(img)?;
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{}\n{} {}\n255\n", magic, w, h).into_bytes();
    let data = img.data();
    let plane = h * w;
    for p in 0..plane {
        for ch in 0..c {
            out.push(to_byte(data[ch * plane + p]));
        }
    }
    Ok(out)
}

/// Write an image, picking PGM or PPM from the channel count.
pub fn write_image(path: &Path, img: &Tensor) -> Result<()> {
    let bytes = encode(img)?;
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Conventional extension for this image's format.
pub fn extension(img: &Tensor) -> Result<&'static str> {
    let (c, _, _) = image_dims(img)?;
    Ok(if c == 1 { "pgm" } else { "ppm" })
}
