//! Adaptive instance normalization of latents toward reference statistics.
//!
//! `adain(x, y) = sigma(y) * (x - mu(x)) / sigma(x) + mu(y)` with per-channel
//! statistics taken over all spatial positions (population variance). The
//! joint form blends several references as `sum_k eta_k * adain(z, ref_k)`
//! with non-negative weights summing to one.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{M3sError, Result};
use crate::scheduler::LatentState;

/// Added to the per-channel variance inside the square root.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Weighted multi-reference AdaIN blend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StyleBlendConfig {
    /// One weight per reference; empty disables modulation.
    pub eta: Vec<f64>,
    /// Fraction of the inference grid the blend is active on: step `i` of
    /// `n` participates when `start <= i/n < end`. `(0, 1)` means all steps.
    pub active_window: (f64, f64),
}

impl Default for StyleBlendConfig {
    fn default() -> Self {
        Self {
            eta: Vec::new(),
            active_window: (0.0, 1.0),
        }
    }
}

impl StyleBlendConfig {
    pub fn is_active(&self) -> bool {
        !self.eta.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        validate_window("blend", self.active_window)?;
        if self.eta.is_empty() {
            return Ok(());
        }
        let mut sum = 0.0;
        for (k, &w) in self.eta.iter().enumerate() {
            if !w.is_finite() || w < 0.0 {
                return Err(M3sError::InvalidConfig(format!(
                    "blend weight {k} must be finite and non-negative, got {w}"
                )));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(M3sError::InvalidConfig(format!(
                "blend weights must sum to 1 (got {sum})"
            )));
        }
        Ok(())
    }

    /// Whether grid step `i` of `n` falls inside the active window.
    pub fn step_in_window(&self, i: usize, n: usize) -> bool {
        in_window(self.active_window, i, n)
    }
}

pub(crate) fn validate_window(context: &str, (start, end): (f64, f64)) -> Result<()> {
    if !(start.is_finite() && end.is_finite() && 0.0 <= start && start < end && end <= 1.0) {
        return Err(M3sError::InvalidConfig(format!(
            "{context} active_window must satisfy 0 <= start < end <= 1, got ({start}, {end})"
        )));
    }
    Ok(())
}

pub(crate) fn in_window((start, end): (f64, f64), i: usize, n: usize) -> bool {
    let pos = i as f64 / n as f64;
    start <= pos && pos < end
}

/// Floored per-channel statistics: mean and `sqrt(var + SIGMA_FLOOR)`.
/// Errors if any channel's raw standard deviation is at or below the floor.
fn channel_stats(x: &Array3<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    let (c, h, w) = x.dim();
    let n = (h * w) as f64;
    let mut means = Vec::with_capacity(c);
    let mut stds = Vec::with_capacity(c);
    for ch in 0..c {
        let lane = x.index_axis(Axis(0), ch);
        let mean = lane.sum() / n;
        let var = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        if var.sqrt() <= SIGMA_FLOOR {
            return Err(M3sError::DegenerateChannel {
                channel: ch,
                sigma: var.sqrt(),
                floor: SIGMA_FLOOR,
            });
        }
        means.push(mean);
        stds.push((var + SIGMA_FLOOR).sqrt());
    }
    Ok((means, stds))
}

/// Renormalize `x` channel-wise to `y`'s statistics.
pub fn adain(x: &Array3<f64>, y: &Array3<f64>) -> Result<Array3<f64>> {
    if x.dim() != y.dim() {
        return Err(M3sError::ShapeMismatch {
            context: "adain",
            expected: format!("{:?}", x.dim()),
            actual: format!("{:?}", y.dim()),
        });
    }
    let (mx, sx) = channel_stats(x)?;
    let (my, sy) = channel_stats(y)?;
    let mut out = x.clone();
    for ch in 0..x.dim().0 {
        let scale = sy[ch] / sx[ch];
        out.index_axis_mut(Axis(0), ch)
            .mapv_inplace(|v| (v - mx[ch]) * scale + my[ch]);
    }
    Ok(out)
}

/// Column-wise AdaIN for attention feature matrices (rows are tokens,
/// columns are channels). Row counts may differ; column counts must match.
pub fn adain_columns(x: &Array2<f64>, y: &Array2<f64>) -> Result<Array2<f64>> {
    if x.ncols() != y.ncols() {
        return Err(M3sError::ShapeMismatch {
            context: "adain_columns",
            expected: format!("{} columns", x.ncols()),
            actual: format!("{} columns", y.ncols()),
        });
    }
    let stats = |m: &Array2<f64>| -> Result<(Vec<f64>, Vec<f64>)> {
        let n = m.nrows() as f64;
        let mut means = Vec::with_capacity(m.ncols());
        let mut stds = Vec::with_capacity(m.ncols());
        for (j, col) in m.axis_iter(Axis(1)).enumerate() {
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            if var.sqrt() <= SIGMA_FLOOR {
                return Err(M3sError::DegenerateChannel {
                    channel: j,
                    sigma: var.sqrt(),
                    floor: SIGMA_FLOOR,
                });
            }
            means.push(mean);
            stds.push((var + SIGMA_FLOOR).sqrt());
        }
        Ok((means, stds))
    };
    let (mx, sx) = stats(x)?;
    let (my, sy) = stats(y)?;
    let mut out = x.clone();
    for j in 0..x.ncols() {
        let scale = sy[j] / sx[j];
        out.index_axis_mut(Axis(1), j)
            .mapv_inplace(|v| (v - mx[j]) * scale + my[j]);
    }
    Ok(out)
}

/// Blend `z` toward several references: `sum_k eta_k * adain(z, ref_k)`.
/// All references must sit at `z`'s timestep; zero-weight references are
/// skipped entirely, so weight vectors like `(1, 0)` reduce bitwise to the
/// single-reference case.
pub fn joint_adain(
    z: &LatentState,
    refs: &[&LatentState],
    blend: &StyleBlendConfig,
) -> Result<LatentState> {
    blend.validate()?;
    if !blend.is_active() {
        return Err(M3sError::InvalidInput(
            "joint_adain called with no blend weights".into(),
        ));
    }
    if refs.len() != blend.eta.len() {
        return Err(M3sError::InvalidInput(format!(
            "blend has {} weights but {} references were supplied",
            blend.eta.len(),
            refs.len()
        )));
    }
    for (k, r) in refs.iter().enumerate() {
        if r.timestep != z.timestep {
            return Err(M3sError::InvalidInput(format!(
                "reference {k} is at timestep {} but the target is at {}",
                r.timestep, z.timestep
            )));
        }
    }
    let active: Vec<usize> = (0..refs.len()).filter(|&k| blend.eta[k] != 0.0).collect();
    if active.len() == 1 && blend.eta[active[0]] == 1.0 {
        let data = adain(&z.data, &refs[active[0]].data)?;
        return LatentState::new(data, z.timestep, z.role);
    }
    let mut acc = Array3::<f64>::zeros(z.data.dim());
    for &k in &active {
        let term = adain(&z.data, &refs[k].data)?;
        let w = blend.eta[k];
        ndarray::Zip::from(&mut acc).and(&term).for_each(|a, &t| *a += w * t);
    }
    LatentState::new(acc, z.timestep, z.role)
}
