//! DDPM noise schedule and deterministic DDIM stepping.
//!
//! The forward process noises a clean latent as
//! `z_t = sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps`, with `abar_t` the
//! running product of `alpha_s = 1 - beta_s`. Sampling walks an evenly
//! strided, strictly decreasing timestep grid with the deterministic DDIM
//! update; inversion walks the algebraic inverse of the same update back
//! up the grid. Both directions share the Tweedie clean-latent estimate
//! `z0|t = (z_t - sqrt(1 - abar_t) * eps) / sqrt(abar_t)`, so one step up
//! followed by one step down with the same noise prediction is exact.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{M3sError, Result};

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
/// Default number of inference steps.
pub const DEFAULT_GRID_STEPS: usize = 100;

/// Beta interpolation rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

/// Noise level of a latent. `Clean` is the fully denoised endpoint sitting
/// below timestep 0 with `abar = 1`; `Noisy(t)` indexes a training timestep
/// in `[0, T)`. The derived ordering puts `Clean` below every `Noisy`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Timestep {
    Clean,
    Noisy(usize),
}

impl std::fmt::Display for Timestep {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Timestep::Clean => write!(f, "clean"),
            Timestep::Noisy(t) => write!(f, "{t}"),
        }
    }
}

/// Which trajectory a latent belongs to. Advisory metadata used for
/// bookkeeping and traces; no arithmetic depends on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Target,
    Reference,
    Z0Estimate,
}

/// A latent tensor (channels, height, width) tagged with its noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub data: Array3<f64>,
    pub timestep: Timestep,
    pub role: Role,
}

impl LatentState {
    /// Rejects non-finite values; every downstream tolerance assumes them.
    pub fn new(data: Array3<f64>, timestep: Timestep, role: Role) -> Result<Self> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(M3sError::InvalidInput(
                "latent contains non-finite values".into(),
            ));
        }
        Ok(Self {
            data,
            timestep,
            role,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }
}

/// Precomputed beta/alpha/abar tables for `T` training steps.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn train_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `abar` at a noise level; 1 at the clean endpoint.
    pub fn alpha_bar(&self, t: Timestep) -> Result<f64> {
        match t {
            Timestep::Clean => Ok(1.0),
            Timestep::Noisy(i) => {
                self.alpha_bars
                    .get(i)
                    .copied()
                    .ok_or(M3sError::TimestepOutOfRange {
                        t: i,
                        len: self.train_steps(),
                    })
            }
        }
    }
}

/// Build the beta/alpha/abar tables. Betas interpolate evenly from
/// `beta_start` to `beta_end` inclusive of both endpoints.
pub fn build_schedule(
    train_steps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule> {
    if train_steps == 0 {
        return Err(M3sError::InvalidConfig(
            "schedule needs at least one training step".into(),
        ));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(M3sError::InvalidConfig(format!(
            "betas must satisfy 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => {
            if train_steps == 1 {
                vec![beta_start]
            } else {
                let last = train_steps - 1;
                (0..train_steps)
                    .map(|i| {
                        if i == last {
                            // pin the endpoint exactly, linspace-style
                            beta_end
                        } else {
                            beta_start + (beta_end - beta_start) * (i as f64 / last as f64)
                        }
                    })
                    .collect()
            }
        }
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(train_steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule {
        kind,
        betas,
        alphas,
        alpha_bars,
    })
}

/// Convenience: the default linear schedule for `train_steps` steps.
pub fn default_schedule(train_steps: usize) -> Result<NoiseSchedule> {
    build_schedule(
        train_steps,
        DEFAULT_BETA_START,
        DEFAULT_BETA_END,
        ScheduleKind::Linear,
    )
}

/// Strictly decreasing inference grid of training timesteps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepGrid {
    steps: Vec<usize>,
}

impl TimestepGrid {
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn first(&self) -> usize {
        self.steps[0]
    }

    /// Sampling transitions in order: `(t_i, next)` where `next` is the grid
    /// entry below `t_i`, ending at the clean endpoint.
    pub fn transitions(&self) -> impl Iterator<Item = (usize, Timestep)> + '_ {
        (0..self.steps.len()).map(move |i| {
            let next = match self.steps.get(i + 1) {
                Some(&t) => Timestep::Noisy(t),
                None => Timestep::Clean,
            };
            (self.steps[i], next)
        })
    }

    /// Inversion transitions in order: `(from, to)` climbing from the clean
    /// endpoint up to the top of the grid.
    pub fn ascents(&self) -> impl Iterator<Item = (Timestep, usize)> + '_ {
        let n = self.steps.len();
        (0..n).map(move |i| {
            let from = if i == 0 {
                Timestep::Clean
            } else {
                Timestep::Noisy(self.steps[n - i])
            };
            (from, self.steps[n - 1 - i])
        })
    }
}

/// Evenly strided grid of `n` training timesteps for a `T`-step schedule,
/// largest first: stride `T / n`, entries `{0, stride, ..., (n-1)*stride}`
/// in decreasing order.
pub fn timestep_grid(train_steps: usize, n: usize) -> Result<TimestepGrid> {
    if n == 0 || n > train_steps {
        return Err(M3sError::InvalidConfig(format!(
            "grid size must be in [1, {train_steps}], got {n}"
        )));
    }
    let stride = train_steps / n;
    let steps: Vec<usize> = (0..n).rev().map(|k| k * stride).collect();
    Ok(TimestepGrid { steps })
}

/// Forward-noise a clean latent: `sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`.
pub fn add_noise(
    z0: &LatentState,
    eps: &Array3<f64>,
    t: Timestep,
    schedule: &NoiseSchedule,
) -> Result<LatentState> {
    if z0.timestep != Timestep::Clean {
        return Err(M3sError::InvalidInput(format!(
            "add_noise requires a clean input latent, got timestep {}",
            z0.timestep
        )));
    }
    check_same_shape("add_noise", &z0.data, eps)?;
    let abar = schedule.alpha_bar(t)?;
    if abar == 1.0 {
        // zero accumulated noise: the output is z0 itself
        let mut out = z0.clone();
        out.timestep = t;
        return Ok(out);
    }
    let a = abar.sqrt();
    let b = (1.0 - abar).sqrt();
    let data = z0.data.mapv(|v| v * a) + &eps.mapv(|v| v * b);
    LatentState::new(data, t, z0.role)
}

/// Tweedie estimate of the clean latent:
/// `z0|t = (z_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)`.
pub fn tweedie_estimate(
    z_t: &LatentState,
    eps_hat: &Array3<f64>,
    schedule: &NoiseSchedule,
) -> Result<LatentState> {
    check_same_shape("tweedie_estimate", &z_t.data, eps_hat)?;
    let abar = schedule.alpha_bar(z_t.timestep)?;
    if abar == 1.0 {
        // already clean, return as-is
        return LatentState::new(z_t.data.clone(), Timestep::Clean, Role::Z0Estimate);
    }
    if abar.is_nan() || abar <= 0.0 {
        return Err(M3sError::InvalidInput(
            "tweedie estimate is singular at abar = 0".into(),
        ));
    }
    let a = abar.sqrt();
    let b = (1.0 - abar).sqrt();
    let data = (&z_t.data - &eps_hat.mapv(|v| v * b)).mapv(|v| v / a);
    LatentState::new(data, Timestep::Clean, Role::Z0Estimate)
}

/// Deterministic DDIM update from `z_t` down to `t_prev`:
/// `z_prev = sqrt(abar_prev) z0|t + sqrt(1 - abar_prev) eps_hat`.
/// At the clean endpoint (`abar_prev = 1`) this is the Tweedie estimate.
pub fn ddim_step(
    z_t: &LatentState,
    eps_hat: &Array3<f64>,
    t_prev: Timestep,
    schedule: &NoiseSchedule,
) -> Result<LatentState> {
    let t = match z_t.timestep {
        Timestep::Noisy(t) => t,
        Timestep::Clean => {
            return Err(M3sError::InvalidInput(
                "ddim_step requires a noisy input latent".into(),
            ))
        }
    };
    if t_prev >= Timestep::Noisy(t) {
        return Err(M3sError::InvalidInput(format!(
            "ddim_step timesteps must decrease, got {t} -> {t_prev}"
        )));
    }
    let z0 = tweedie_estimate(z_t, eps_hat, schedule)?;
    ddim_step_from_estimate(&z0, eps_hat, t_prev, schedule)
}

/// DDIM update expressed on an explicit clean-latent estimate. The pipeline
/// uses this form so regulation can adjust `z0|t` before re-noising; with an
/// unmodified Tweedie estimate it is bit-identical to [`ddim_step`].
pub fn ddim_step_from_estimate(
    z0: &LatentState,
    eps_hat: &Array3<f64>,
    t_prev: Timestep,
    schedule: &NoiseSchedule,
) -> Result<LatentState> {
    check_same_shape("ddim_step_from_estimate", &z0.data, eps_hat)?;
    let abar_prev = schedule.alpha_bar(t_prev)?;
    if abar_prev == 1.0 {
        return LatentState::new(z0.data.clone(), Timestep::Clean, Role::Target);
    }
    let a = abar_prev.sqrt();
    let b = (1.0 - abar_prev).sqrt();
    let data = z0.data.mapv(|v| v * a) + &eps_hat.mapv(|v| v * b);
    LatentState::new(data, t_prev, Role::Target)
}

/// Algebraic inverse of [`ddim_step`]: lift `z_t` up to `t_next` under a
/// fixed noise prediction. `t_next == z_t.timestep` is the identity.
pub fn ddim_invert_step(
    z_t: &LatentState,
    eps_hat: &Array3<f64>,
    t_next: Timestep,
    schedule: &NoiseSchedule,
) -> Result<LatentState> {
    if t_next == z_t.timestep {
        return Ok(z_t.clone());
    }
    if t_next < z_t.timestep {
        return Err(M3sError::InvalidInput(format!(
            "ddim_invert_step timesteps must increase, got {} -> {}",
            z_t.timestep, t_next
        )));
    }
    check_same_shape("ddim_invert_step", &z_t.data, eps_hat)?;
    let z0 = tweedie_estimate(z_t, eps_hat, schedule)?;
    let abar_next = schedule.alpha_bar(t_next)?;
    let a = abar_next.sqrt();
    let b = (1.0 - abar_next).sqrt();
    let data = z0.data.mapv(|v| v * a) + &eps_hat.mapv(|v| v * b);
    LatentState::new(data, t_next, z_t.role)
}

fn check_same_shape(context: &'static str, a: &Array3<f64>, b: &Array3<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(M3sError::ShapeMismatch {
            context,
            expected: format!("{:?}", a.dim()),
            actual: format!("{:?}", b.dim()),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::{max_abs_diff, normal_array3, seeded_rng};
    use ndarray::Array3;

    fn latent(v: f64) -> LatentState {
        LatentState::new(Array3::from_elem((1, 2, 2), v), Timestep::Clean, Role::Target).unwrap()
    }

    #[test]
    fn single_step_schedule_tables() {
        let s = build_schedule(1, 0.5, 0.5, ScheduleKind::Linear).unwrap();
        assert_eq!(s.betas(), &[0.5]);
        assert_eq!(s.alphas(), &[0.5]);
        assert_eq!(s.alpha_bars(), &[0.5]);
    }

    #[test]
    fn two_step_schedule_tables() {
        // alphas [0.9, 0.7] -> abars [0.9, 0.63]
        let s = build_schedule(2, 0.1, 0.3, ScheduleKind::Linear).unwrap();
        assert!((s.alpha_bars()[0] - 0.9).abs() < 1e-12);
        assert!((s.alpha_bars()[1] - 0.63).abs() < 1e-12);
    }

    #[test]
    fn default_schedule_is_strictly_decreasing_with_consistent_products() {
        let s = default_schedule(DEFAULT_TRAIN_STEPS).unwrap();
        assert_eq!(s.train_steps(), 1000);
        for t in 1..1000 {
            assert!(s.alpha_bars()[t] < s.alpha_bars()[t - 1]);
            assert!(s.alpha_bars()[t] > 0.0 && s.alpha_bars()[t] < 1.0);
        }
        // independent product oracle: accumulate in reverse order
        for &t in &[0usize, 1, 10, 500, 999] {
            let mut p = 1.0;
            for i in (0..=t).rev() {
                p *= s.alphas()[i];
            }
            let rel = (s.alpha_bars()[t] - p).abs() / p;
            assert!(rel < 1e-12, "relative product error {rel} at t={t}");
        }
    }

    #[test]
    fn schedule_rejects_bad_betas() {
        assert!(build_schedule(0, 0.1, 0.2, ScheduleKind::Linear).is_err());
        assert!(build_schedule(10, 0.0, 0.2, ScheduleKind::Linear).is_err());
        assert!(build_schedule(10, 0.3, 0.2, ScheduleKind::Linear).is_err());
        assert!(build_schedule(10, 0.1, 1.0, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn grid_examples() {
        let g = timestep_grid(1000, 1000).unwrap();
        assert_eq!(g.first(), 999);
        assert_eq!(g.steps()[999], 0);
        assert_eq!(g.len(), 1000);

        let g = timestep_grid(1000, 100).unwrap();
        assert_eq!(g.first(), 990);
        assert_eq!(g.steps()[1], 980);
        assert_eq!(*g.steps().last().unwrap(), 0);

        let g = timestep_grid(10, 2).unwrap();
        assert_eq!(g.steps(), &[5, 0]);

        assert!(timestep_grid(10, 11).is_err());
        assert!(timestep_grid(10, 0).is_err());
    }

    #[test]
    fn grid_transitions_cover_the_walk_down_and_up() {
        let g = timestep_grid(10, 2).unwrap();
        let down: Vec<_> = g.transitions().collect();
        assert_eq!(down, vec![(5, Timestep::Noisy(0)), (0, Timestep::Clean)]);
        let up: Vec<_> = g.ascents().collect();
        assert_eq!(up, vec![(Timestep::Clean, 0), (Timestep::Noisy(0), 5)]);
    }

    #[test]
    fn add_noise_at_clean_level_returns_z0() {
        let s = build_schedule(2, 0.1, 0.3, ScheduleKind::Linear).unwrap();
        let z0 = latent(0.25);
        let eps = Array3::from_elem((1, 2, 2), 3.0);
        let out = add_noise(&z0, &eps, Timestep::Clean, &s).unwrap();
        assert_eq!(out.data, z0.data);
    }

    #[test]
    fn add_noise_hand_value() {
        // abar = 0.25: 0.5*2 + sqrt(0.75)*1 = 1.8660254037844386
        let s = build_schedule(1, 0.75, 0.75, ScheduleKind::Linear).unwrap();
        let z0 = latent(2.0);
        let eps = Array3::from_elem((1, 2, 2), 1.0);
        let out = add_noise(&z0, &eps, Timestep::Noisy(0), &s).unwrap();
        assert!((out.data[[0, 0, 0]] - 1.8660254037844386).abs() < 1e-12);
        assert_eq!(out.timestep, Timestep::Noisy(0));
    }

    #[test]
    fn add_noise_with_zero_eps_scales_by_sqrt_abar() {
        let s = build_schedule(1, 0.75, 0.75, ScheduleKind::Linear).unwrap();
        let z0 = latent(2.0);
        let eps = Array3::zeros((1, 2, 2));
        let out = add_noise(&z0, &eps, Timestep::Noisy(0), &s).unwrap();
        assert!((out.data[[0, 0, 0]] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn add_noise_shape_mismatch_errors() {
        let s = build_schedule(1, 0.5, 0.5, ScheduleKind::Linear).unwrap();
        let z0 = latent(0.0);
        let eps = Array3::zeros((1, 2, 3));
        assert!(matches!(
            add_noise(&z0, &eps, Timestep::Noisy(0), &s),
            Err(M3sError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn tweedie_hand_value() {
        // abar = 0.25: (1 - sqrt(0.75)*0.5) / 0.5 = 1.1339745962155614
        let s = build_schedule(1, 0.75, 0.75, ScheduleKind::Linear).unwrap();
        let z_t = LatentState::new(
            Array3::from_elem((1, 1, 1), 1.0),
            Timestep::Noisy(0),
            Role::Target,
        )
        .unwrap();
        let eps = Array3::from_elem((1, 1, 1), 0.5);
        let z0 = tweedie_estimate(&z_t, &eps, &s).unwrap();
        assert!((z0.data[[0, 0, 0]] - 1.1339745962155614).abs() < 1e-12);
        assert_eq!(z0.timestep, Timestep::Clean);
        assert_eq!(z0.role, Role::Z0Estimate);
    }

    #[test]
    fn tweedie_at_clean_level_is_identity() {
        let s = build_schedule(1, 0.5, 0.5, ScheduleKind::Linear).unwrap();
        let z = latent(0.7);
        let eps = Array3::from_elem((1, 2, 2), 0.3);
        let out = tweedie_estimate(&z, &eps, &s).unwrap();
        assert_eq!(out.data, z.data);
    }

    #[test]
    fn tweedie_inverts_add_noise_at_every_level() {
        let s = default_schedule(1000).unwrap();
        let mut rng = seeded_rng(42);
        let z0 = LatentState::new(
            normal_array3(&mut rng, (4, 8, 8)),
            Timestep::Clean,
            Role::Target,
        )
        .unwrap();
        let eps = normal_array3(&mut rng, (4, 8, 8));
        for &t in &[0usize, 250, 500, 999] {
            let z_t = add_noise(&z0, &eps, Timestep::Noisy(t), &s).unwrap();
            let back = tweedie_estimate(&z_t, &eps, &s).unwrap();
            assert!(
                max_abs_diff(&back.data, &z0.data) < 1e-6,
                "round trip failed at t={t}"
            );
        }
    }

    #[test]
    fn ddim_step_to_clean_endpoint_is_the_tweedie_estimate() {
        let s = default_schedule(1000).unwrap();
        let mut rng = seeded_rng(3);
        let z0 = LatentState::new(
            normal_array3(&mut rng, (2, 4, 4)),
            Timestep::Clean,
            Role::Target,
        )
        .unwrap();
        let eps = normal_array3(&mut rng, (2, 4, 4));
        let z_t = add_noise(&z0, &eps, Timestep::Noisy(100), &s).unwrap();
        let stepped = ddim_step(&z_t, &eps, Timestep::Clean, &s).unwrap();
        let tweedie = tweedie_estimate(&z_t, &eps, &s).unwrap();
        assert_eq!(stepped.data, tweedie.data);
        assert_eq!(stepped.timestep, Timestep::Clean);
    }

    #[test]
    fn ddim_step_matches_the_forward_noising_oracle() {
        // With a fixed eps, stepping t -> t_prev must land exactly where
        // forward noising z0 to t_prev would.
        let s = default_schedule(1000).unwrap();
        let mut rng = seeded_rng(11);
        let z0 = LatentState::new(
            normal_array3(&mut rng, (2, 4, 4)),
            Timestep::Clean,
            Role::Target,
        )
        .unwrap();
        let eps = normal_array3(&mut rng, (2, 4, 4));
        for &(t, tp) in &[(999usize, 500usize), (500, 100), (100, 0)] {
            let z_t = add_noise(&z0, &eps, Timestep::Noisy(t), &s).unwrap();
            let stepped = ddim_step(&z_t, &eps, Timestep::Noisy(tp), &s).unwrap();
            let oracle = add_noise(&z0, &eps, Timestep::Noisy(tp), &s).unwrap();
            assert!(
                max_abs_diff(&stepped.data, &oracle.data) < 1e-9,
                "forward oracle mismatch {t}->{tp}"
            );
        }
    }

    #[test]
    fn ddim_step_rejects_non_decreasing_pairs() {
        let s = default_schedule(1000).unwrap();
        let z = LatentState::new(Array3::zeros((1, 1, 1)), Timestep::Noisy(10), Role::Target)
            .unwrap();
        let eps = Array3::zeros((1, 1, 1));
        assert!(ddim_step(&z, &eps, Timestep::Noisy(10), &s).is_err());
        assert!(ddim_step(&z, &eps, Timestep::Noisy(11), &s).is_err());
    }

    #[test]
    fn invert_step_with_equal_timestep_is_identity() {
        let s = default_schedule(1000).unwrap();
        let z = LatentState::new(
            Array3::from_elem((1, 1, 1), 0.4),
            Timestep::Noisy(7),
            Role::Reference,
        )
        .unwrap();
        let eps = Array3::from_elem((1, 1, 1), 0.2);
        let out = ddim_invert_step(&z, &eps, Timestep::Noisy(7), &s).unwrap();
        assert_eq!(out.data, z.data);
        assert!(ddim_invert_step(&z, &eps, Timestep::Noisy(6), &s).is_err());
        assert!(ddim_invert_step(&z, &eps, Timestep::Clean, &s).is_err());
    }

    #[test]
    fn invert_then_step_composes_to_identity() {
        let s = default_schedule(1000).unwrap();
        let mut rng = seeded_rng(5);
        let z = LatentState::new(
            normal_array3(&mut rng, (4, 8, 8)),
            Timestep::Noisy(490),
            Role::Target,
        )
        .unwrap();
        let eps = normal_array3(&mut rng, (4, 8, 8));
        let up = ddim_invert_step(&z, &eps, Timestep::Noisy(500), &s).unwrap();
        let down = ddim_step(&up, &eps, Timestep::Noisy(490), &s).unwrap();
        assert!(max_abs_diff(&down.data, &z.data) < 1e-6);

        // and from the clean endpoint
        let z0 = LatentState::new(
            normal_array3(&mut rng, (4, 8, 8)),
            Timestep::Clean,
            Role::Reference,
        )
        .unwrap();
        let up = ddim_invert_step(&z0, &eps, Timestep::Noisy(0), &s).unwrap();
        let down = ddim_step(&up, &eps, Timestep::Clean, &s).unwrap();
        assert!(max_abs_diff(&down.data, &z0.data) < 1e-6);
    }
}
