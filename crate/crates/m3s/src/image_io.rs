//! Grayscale PNG import/export and contact-sheet assembly.
//!
//! Images travel through the library as `(1, h, w)` tensors with values in
//! `[-1, 1]`. Export quantizes with `byte = round((v + 1) / 2 * 255)` and
//! import inverts that map, so writing a just-read image reproduces the
//! file byte for byte. Color inputs are collapsed to luma on read.

use std::path::Path;

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder};
use ndarray::Array3;

use crate::error::{M3sError, Result};
use crate::util::atomic_write;

/// Clamp every value into `[-1, 1]`.
pub fn clamp_unit(img: &Array3<f64>) -> Array3<f64> {
    img.mapv(|v| v.clamp(-1.0, 1.0))
}

fn check_single_channel(img: &Array3<f64>, context: &'static str) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 1 || h == 0 || w == 0 {
        return Err(M3sError::ShapeMismatch {
            context,
            expected: "(1, h, w) with nonzero extents".into(),
            actual: format!("{:?}", img.dim()),
        });
    }
    Ok(())
}

/// Load a PNG as a `(1, h, w)` tensor in `[-1, 1]`, converting color to luma.
pub fn read_png(path: &Path) -> Result<Array3<f64>> {
    let gray = image::open(path)?.to_luma8();
    let (w, h) = gray.dimensions();
    let mut out = Array3::zeros((1, h as usize, w as usize));
    for (x, y, pixel) in gray.enumerate_pixels() {
        out[[0, y as usize, x as usize]] = pixel.0[0] as f64 / 255.0 * 2.0 - 1.0;
    }
    Ok(out)
}

/// Write a `(1, h, w)` tensor in `[-1, 1]` as a grayscale PNG. Values
/// outside the unit range are rejected rather than silently clamped; the
/// file appears atomically.
pub fn write_png(path: &Path, img: &Array3<f64>) -> Result<()> {
    check_single_channel(img, "write_png image")?;
    if let Some(v) = img.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
        return Err(M3sError::InvalidInput(format!(
            "image value {v} is outside [-1, 1]; clamp before export"
        )));
    }
    let (_, h, w) = img.dim();
    let mut bytes = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            bytes.push(((img[[0, i, j]] + 1.0) / 2.0 * 255.0).round() as u8);
        }
    }
    let mut encoded = Vec::new();
    PngEncoder::new(&mut encoded).write_image(
        &bytes,
        w as u32,
        h as u32,
        ExtendedColorType::L8,
    )?;
    atomic_write(path, &encoded)
}

/// Lay panels out left to right with `sep`-pixel separators of value `fill`.
/// All panels must share one shape.
pub fn contact_sheet(panels: &[Array3<f64>], sep: usize, fill: f64) -> Result<Array3<f64>> {
    let first = panels
        .first()
        .ok_or_else(|| M3sError::InvalidInput("contact sheet needs at least one panel".into()))?;
    check_single_channel(first, "contact sheet panel")?;
    let (_, h, w) = first.dim();
    for (i, p) in panels.iter().enumerate() {
        if p.dim() != first.dim() {
            return Err(M3sError::ShapeMismatch {
                context: "contact sheet panel",
                expected: format!("{:?}", first.dim()),
                actual: format!("{:?} (panel {i})", p.dim()),
            });
        }
    }
    let total_w = panels.len() * w + (panels.len() - 1) * sep;
    let mut sheet = Array3::from_elem((1, h, total_w), fill);
    for (n, p) in panels.iter().enumerate() {
        let x0 = n * (w + sep);
        for i in 0..h {
            for j in 0..w {
                sheet[[0, i, x0 + j]] = p[[0, i, j]];
            }
        }
    }
    Ok(sheet)
}
