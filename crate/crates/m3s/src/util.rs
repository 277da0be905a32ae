//! Small shared helpers: seeded draws, hashing, atomic file writes.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;

/// FNV-1a over a byte string; used to derive RNG seeds from text.
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Standard normal draws in row-major order, so tensor layout pins the
/// stream order.
pub(crate) fn normal_array3(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Array3<f64> {
    let n = shape.0 * shape.1 * shape.2;
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Array3::from_shape_vec(shape, data).expect("shape/data agree by construction")
}

pub(crate) fn normal_array1(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Array1<f64> {
    let data: Vec<f64> = (0..len)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            x * scale
        })
        .collect();
    Array1::from_vec(data)
}

pub(crate) fn normal_array2(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            x * scale
        })
        .collect();
    Array2::from_shape_vec((rows, cols), data).expect("shape/data agree by construction")
}

pub(crate) fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Write `bytes` to `path` through a temp file in the same directory plus a
/// rename, so readers never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string());
    let tmp = dir.join(format!(".{name}.tmp"));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Largest elementwise |a - b|; 0 for empty tensors. Only tests compare
/// tensors this way, so the non-test build never references it.
#[cfg_attr(not(test), allow(dead_code))]
pub fn max_abs_diff(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
