//! Split style-content classifier-free guidance.
//!
//! The combined prediction is
//! `eps = eps_uncond + w1 (eps_content - eps_uncond) + w2 (eps_style - eps_uncond)`,
//! where the content branch is the text-conditioned prediction with
//! reference injection and the style branch is the null-conditioned
//! prediction with the same injection. The style weight can ramp from
//! `w2 / 3` at the first inference step up to `w2` at the last, which keeps
//! early steps from overcommitting to reference texture.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{M3sError, Result};

/// Style-weight schedule across the inference grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaRamp {
    /// `w2` at every step.
    Constant,
    /// Linear from `w2 / 3` at step 0 to `w2` at the last step.
    LinearThird,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub omega1: f64,
    /// Peak style weight; the per-step value comes from [`omega2_at`].
    pub omega2_max: f64,
    pub ramp: OmegaRamp,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            omega1: 15.0,
            omega2_max: 15.0,
            ramp: OmegaRamp::LinearThird,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("omega1", self.omega1), ("omega2_max", self.omega2_max)] {
            if !v.is_finite() || v < 0.0 {
                return Err(M3sError::InvalidConfig(format!(
                    "guidance {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Combine the three branch predictions. Zero weights skip their term
/// entirely, so `w2 = 0` degenerates bitwise to classic classifier-free
/// guidance and `w1 = w2 = 0` returns the unconditional branch bitwise.
pub fn combine(
    eps_uncond: &Array3<f64>,
    eps_content: &Array3<f64>,
    eps_style: &Array3<f64>,
    omega1: f64,
    omega2: f64,
) -> Result<Array3<f64>> {
    for (name, v) in [("omega1", omega1), ("omega2", omega2)] {
        if !v.is_finite() {
            return Err(M3sError::InvalidInput(format!(
                "guidance weight {name} must be finite, got {v}"
            )));
        }
    }
    if eps_uncond.dim() != eps_content.dim() || eps_uncond.dim() != eps_style.dim() {
        return Err(M3sError::ShapeMismatch {
            context: "combine",
            expected: format!("{:?}", eps_uncond.dim()),
            actual: format!("{:?} / {:?}", eps_content.dim(), eps_style.dim()),
        });
    }
    let mut out = eps_uncond.clone();
    if omega1 != 0.0 {
        ndarray::Zip::from(&mut out)
            .and(eps_content)
            .and(eps_uncond)
            .for_each(|o, &c, &u| *o += omega1 * (c - u));
    }
    if omega2 != 0.0 {
        ndarray::Zip::from(&mut out)
            .and(eps_style)
            .and(eps_uncond)
            .for_each(|o, &s, &u| *o += omega2 * (s - u));
    }
    Ok(out)
}

/// Style weight at `step_index` (0-based) on a grid of `total_steps`.
/// Single-step grids get the full `omega2_max`.
pub fn omega2_at(cfg: &GuidanceConfig, step_index: usize, total_steps: usize) -> Result<f64> {
    if total_steps == 0 {
        return Err(M3sError::InvalidInput("total_steps must be positive".into()));
    }
    if step_index >= total_steps {
        return Err(M3sError::InvalidInput(format!(
            "step index {step_index} out of range for {total_steps} steps"
        )));
    }
    cfg.validate()?;
    Ok(match cfg.ramp {
        OmegaRamp::Constant => cfg.omega2_max,
        OmegaRamp::LinearThird => {
            if total_steps == 1 || step_index == total_steps - 1 {
                // pin the endpoint exactly
                cfg.omega2_max
            } else {
                let base = cfg.omega2_max / 3.0;
                let frac = step_index as f64 / (total_steps - 1) as f64;
                base + frac * (cfg.omega2_max - base)
            }
        }
    })
}
