//! 8-bit PNG encoding of image tensors and masks.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, ImageReader, Limits};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::scenegen::Image;

const MAX_DECODE_SIDE: u32 = 4096;

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let mut buf = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                buf.push(to_u8(img[[ch, y, x]]));
            }
        }
    }
    let rgb = image::RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer sized to image");
    let mut out = Cursor::new(Vec::new());
    rgb.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(out.into_inner())
}

/// Grayscale PNG of a `[h, w]` map in `[0, 1]`.
pub fn encode_gray_png(map: &Array2<f32>) -> Result<Vec<u8>> {
    let (h, w) = map.dim();
    let buf: Vec<u8> = map.iter().map(|&v| to_u8(v)).collect();
    let gray = image::GrayImage::from_raw(w as u32, h as u32, buf).expect("buffer sized to image");
    let mut out = Cursor::new(Vec::new());
    gray.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(out.into_inner())
}

/// Decodes a PNG to an RGB tensor. Alpha is dropped; grayscale is expanded.
pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let mut reader = ImageReader::with_format(Cursor::new(bytes), ImageFormat::Png);
    let mut limits = Limits::default();
    limits.max_image_width = Some(MAX_DECODE_SIDE);
    limits.max_image_height = Some(MAX_DECODE_SIDE);
    limits.max_alloc = Some(256 * 1024 * 1024);
    reader.limits(limits);
    let decoded = reader.decode().map_err(|e| Error::Image(e.to_string()))?;
    let rgb = decoded.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.into_raw();
    Ok(Array3::from_shape_fn((3, h, w), |(c, y, x)| raw[(y * w + x) * 3 + c] as f32 / 255.0))
}

/// Like [`decode_png`] but requires a `side × side` image.
pub fn decode_png_sized(bytes: &[u8], side: usize) -> Result<Image> {
    let img = decode_png(bytes)?;
    if img.dim() != (3, side, side) {
        let (_, h, w) = img.dim();
        return Err(Error::Shape(format!("expected a {side}x{side} image, got {w}x{h}")));
    }
    Ok(img)
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let bytes = encode_png(img)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_png(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Nearest-neighbour upsampling of a `[h, w]` map by an integer factor.
pub fn upsample_nearest(map: &Array2<f32>, factor: usize) -> Array2<f32> {
    let (h, w) = map.dim();
    Array2::from_shape_fn((h * factor, w * factor), |(y, x)| map[[y / factor, x / factor]])
}
