//! PNG codecs: masks are 8-bit single-channel, value = class id, 255 = ignore.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use super::mask::SemanticMask;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::scalar::Scalar;
use crate::tensor::ImageTensor;

pub fn decode_mask_png(bytes: &[u8]) -> Result<SemanticMask> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
    match img {
        DynamicImage::ImageLuma8(gray) => {
            let (w, h) = gray.dimensions();
            SemanticMask::new(h as usize, w as usize, gray.into_raw())
        }
        other => Err(Error::Dataset(format!(
            "mask PNG must be 8-bit single channel, found {:?}",
            other.color()
        ))),
    }
}

pub fn encode_mask_png(mask: &SemanticMask) -> Result<Vec<u8>> {
    let img = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, mask.data().to_vec())
        .expect("mask buffer matches dimensions");
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn read_mask_png(path: &Path) -> Result<SemanticMask> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_mask_png(&bytes).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

pub fn write_mask_png(path: &Path, mask: &SemanticMask) -> Result<()> {
    write_atomic(path, &encode_mask_png(mask)?)
}

/// Quantizes `[0, 1]` intensities (clamped) into an 8-bit RGB PNG.
/// Single-channel tensors are written as gray RGB; extra channels are dropped.
pub fn encode_rgb_png<S: Scalar>(image: &ImageTensor<S>) -> Result<Vec<u8>> {
    if image.channels() == 0 {
        return Err(Error::shape("image has no channels"));
    }
    let (h, w) = (image.height(), image.width());
    let mut raw = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let px = image.pixel(y, x);
            for c in 0..3 {
                let v = px[c.min(px.len() - 1)].as_f64();
                raw.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let img = RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer matches dimensions");
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn write_rgb_png<S: Scalar>(path: &Path, image: &ImageTensor<S>) -> Result<()> {
    write_atomic(path, &encode_rgb_png(image)?)
}

/// Reads any PNG as RGB with intensities scaled to `[0, 1]`.
pub fn read_rgb_png<S: Scalar>(path: &Path) -> Result<ImageTensor<S>> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png)?.into_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| S::of(v as f64 / 255.0)).collect();
    ImageTensor::from_vec(h as usize, w as usize, 3, data)
}

/// Image dimensions `(height, width)` without decoding pixel data.
pub fn png_dimensions(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path)?;
    Ok((h as usize, w as usize))
}
