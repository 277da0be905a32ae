//! End-to-end synthesis: reference preparation, the per-step sampling loop,
//! and parameter sweeps.
//!
//! Each step runs in a fixed order: style-tendency modulation of the noisy
//! latent, three backbone predictions (unconditional, text-conditioned with
//! injection, null-conditioned with injection), split guidance, the clean
//! estimate, optional edge regulation, and the deterministic re-noise to
//! the next grid point. With injection off, blending inactive, and
//! regulation disabled the loop reproduces [`vanilla_sample`] bitwise:
//! the style branch then equals the unconditional branch exactly and its
//! guidance term contributes nothing.

use std::collections::BTreeSet;
use std::path::PathBuf;

use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{
    injected_attention, standard_attention, AttentionFeatures, InjectionConfig, InjectionMode,
};
use crate::backend::{AttentionHook, DenoiserBackend, LayerDescriptor, StandardAttentionHook};
use crate::cache::FeatureCache;
use crate::error::{M3sError, Result};
use crate::guidance::{combine, omega2_at, GuidanceConfig};
use crate::image_io::{clamp_unit, read_png};
use crate::modulation::{joint_adain, StyleBlendConfig};
use crate::reference::{build_feature_cache, prepare_references, ReferenceBundle};
use crate::regulation::{image_edge_loss, regulate, RegulationConfig};
use crate::scheduler::{
    ddim_step_from_estimate, default_schedule, timestep_grid, tweedie_estimate, LatentState, Role,
    Timestep, DEFAULT_TRAIN_STEPS,
};
use crate::util::{normal_array3, seeded_rng};

/// Default number of sampling steps.
pub const DEFAULT_GRID_STEPS: usize = 100;
/// Default post-decode brightening threshold.
pub const DEFAULT_BRIGHTEN_THRESHOLD: f64 = 0.7;

/// Everything one synthesis run needs. Deserializes strictly: unknown
/// fields are rejected, missing ones take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub prompt: String,
    /// Paths of the reference style images.
    pub references: Vec<PathBuf>,
    pub injection: InjectionConfig,
    pub blend: StyleBlendConfig,
    pub guidance: GuidanceConfig,
    pub regulation: RegulationConfig,
    pub steps: usize,
    pub seed: u64,
    pub brighten_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            prompt: String::new(),
            references: Vec::new(),
            injection: InjectionConfig::default(),
            blend: StyleBlendConfig::default(),
            guidance: GuidanceConfig::default(),
            regulation: RegulationConfig::default(),
            steps: DEFAULT_GRID_STEPS,
            seed: 0,
            brighten_threshold: DEFAULT_BRIGHTEN_THRESHOLD,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(M3sError::InvalidConfig("steps must be at least 1".into()));
        }
        if !(self.brighten_threshold.is_finite()
            && self.brighten_threshold > -1.0
            && self.brighten_threshold <= 1.0)
        {
            return Err(M3sError::InvalidConfig(format!(
                "brighten_threshold must lie in (-1, 1], got {}",
                self.brighten_threshold
            )));
        }
        self.injection.validate()?;
        self.blend.validate()?;
        self.guidance.validate()?;
        self.regulation.validate()?;
        if self.references.is_empty() {
            if self.injection.mode != InjectionMode::None {
                return Err(M3sError::InvalidConfig(
                    "references is empty but injection.mode is active; \
                     add reference images or set the mode to none"
                        .into(),
                ));
            }
            if self.blend.is_active() {
                return Err(M3sError::InvalidConfig(
                    "references is empty but blend.eta is non-empty".into(),
                ));
            }
        }
        if self.blend.is_active() && self.blend.eta.len() != self.references.len() {
            return Err(M3sError::InvalidConfig(format!(
                "blend.eta has {} weights for {} references",
                self.blend.eta.len(),
                self.references.len()
            )));
        }
        if self.injection.mode == InjectionMode::KvSwap && self.references.len() != 1 {
            return Err(M3sError::InvalidConfig(format!(
                "injection.mode kv_swap works with exactly one reference, got {}",
                self.references.len()
            )));
        }
        Ok(())
    }
}

/// Per-step record of what the sampler did.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepTrace {
    pub step: usize,
    pub timestep: usize,
    pub omega2: f64,
    /// Edge loss of the decoded clean estimate before/after regulation;
    /// absent on steps where regulation did not run.
    pub edge_loss_before: Option<f64>,
    pub edge_loss_after: Option<f64>,
}

/// A finished synthesis: the decoded image in `[-1, 1]`, the per-step
/// trace, and the exact configuration that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisResult {
    pub image: Array3<f64>,
    pub trace: Vec<StepTrace>,
    pub config_echo: RunConfig,
}

/// Inverted trajectories plus captured attention features, shared across
/// every run that uses the same references.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedReferences {
    pub bundles: Vec<ReferenceBundle>,
    pub cache: FeatureCache,
}

/// Load the reference images named by the config, invert them, and capture
/// their attention features at the injection layers.
pub fn prepare<B>(cfg: &RunConfig, backend: &B) -> Result<PreparedReferences>
where
    B: DenoiserBackend + ?Sized,
{
    cfg.validate()?;
    let images: Vec<Array3<f64>> = cfg
        .references
        .iter()
        .map(|p| read_png(p))
        .collect::<Result<_>>()?;
    let schedule = default_schedule(DEFAULT_TRAIN_STEPS)?;
    let grid = timestep_grid(DEFAULT_TRAIN_STEPS, cfg.steps)?;
    let bundles = prepare_references(&images, backend, &schedule, &grid)?;
    let layer_ids = cfg.injection.resolved_layer_ids(backend.attention_layers())?;
    let cache = build_feature_cache(&bundles, backend, &grid, &layer_ids)?;
    Ok(PreparedReferences { bundles, cache })
}

/// Routes targeted layers through reference K/V injection and leaves the
/// rest of the backbone untouched.
pub struct InjectionHook<'a> {
    cfg: &'a InjectionConfig,
    layer_ids: &'a BTreeSet<usize>,
    cache: &'a FeatureCache,
}

impl<'a> InjectionHook<'a> {
    pub fn new(
        cfg: &'a InjectionConfig,
        layer_ids: &'a BTreeSet<usize>,
        cache: &'a FeatureCache,
    ) -> Self {
        Self {
            cfg,
            layer_ids,
            cache,
        }
    }
}

impl AttentionHook for InjectionHook<'_> {
    fn attention(
        &mut self,
        layer: &LayerDescriptor,
        timestep: usize,
        features: &AttentionFeatures,
    ) -> Result<ndarray::Array2<f64>> {
        if self.cfg.mode == InjectionMode::None || !self.layer_ids.contains(&layer.id) {
            return standard_attention(features);
        }
        let refs = self.cache.references_at(layer.id, timestep)?;
        injected_attention(features, &refs, self.cfg)
    }
}

/// Run the full sampling loop against already-prepared references.
pub fn synthesize_prepared<B>(
    cfg: &RunConfig,
    backend: &B,
    prepared: &PreparedReferences,
) -> Result<SynthesisResult>
where
    B: DenoiserBackend + ?Sized,
{
    cfg.validate()?;
    if prepared.bundles.len() != cfg.references.len() {
        return Err(M3sError::InvalidInput(format!(
            "config names {} references but {} were prepared",
            cfg.references.len(),
            prepared.bundles.len()
        )));
    }
    let schedule = default_schedule(DEFAULT_TRAIN_STEPS)?;
    let grid = timestep_grid(DEFAULT_TRAIN_STEPS, cfg.steps)?;
    let n = grid.len();
    let text = backend.embed_text(&cfg.prompt);
    let null = backend.null_conditioning();
    let layer_ids = cfg.injection.resolved_layer_ids(backend.attention_layers())?;

    let mut z = LatentState::new(
        normal_array3(&mut seeded_rng(cfg.seed), backend.latent_shape()),
        Timestep::Noisy(grid.first()),
        Role::Target,
    )?;
    let mut trace = Vec::with_capacity(n);
    for (i, (t, t_next)) in grid.transitions().enumerate() {
        if cfg.blend.is_active() && cfg.blend.step_in_window(i, n) {
            let refs: Vec<&LatentState> = prepared
                .bundles
                .iter()
                .map(|b| b.state_at(Timestep::Noisy(t)))
                .collect::<Result<_>>()?;
            z = joint_adain(&z, &refs, &cfg.blend)?;
        }

        let eps_u = backend.predict_noise(&z.data, t, &null, &mut StandardAttentionHook)?;
        let mut hook = InjectionHook::new(&cfg.injection, &layer_ids, &prepared.cache);
        let eps_c = backend.predict_noise(&z.data, t, &text, &mut hook)?;
        let mut hook = InjectionHook::new(&cfg.injection, &layer_ids, &prepared.cache);
        let eps_s = backend.predict_noise(&z.data, t, &null, &mut hook)?;

        let omega2 = omega2_at(&cfg.guidance, i, n)?;
        let eps = combine(&eps_u, &eps_c, &eps_s, cfg.guidance.omega1, omega2)?;

        let mut z0 = tweedie_estimate(&z, &eps, &schedule)?;
        let (mut before, mut after) = (None, None);
        if cfg.regulation.enabled && cfg.regulation.step_in_window(i, n) {
            before = Some(image_edge_loss(&backend.decode(&z0.data)?)?);
            z0 = regulate(&z0, backend, &cfg.regulation)?;
            after = Some(image_edge_loss(&backend.decode(&z0.data)?)?);
        }
        trace.push(StepTrace {
            step: i,
            timestep: t,
            omega2,
            edge_loss_before: before,
            edge_loss_after: after,
        });
        z = ddim_step_from_estimate(&z0, &eps, t_next, &schedule)?;
    }
    debug_assert_eq!(z.timestep, Timestep::Clean);

    let image = brighten(&clamp_unit(&backend.decode(&z.data)?), cfg.brighten_threshold)?;
    Ok(SynthesisResult {
        image,
        trace,
        config_echo: cfg.clone(),
    })
}

/// Prepare references and synthesize in one call.
pub fn synthesize<B>(cfg: &RunConfig, backend: &B) -> Result<SynthesisResult>
where
    B: DenoiserBackend + ?Sized,
{
    let prepared = prepare(cfg, backend)?;
    synthesize_prepared(cfg, backend, &prepared)
}

/// Plain two-branch classifier-free-guidance sampling with none of the
/// style machinery. Uses only the prompt, guidance weights (`omega1`, with
/// the style weight forced to zero), steps, seed, and brighten threshold.
/// The full pipeline must reproduce this bitwise when injection, blending,
/// and regulation are all inactive.
pub fn vanilla_sample<B>(cfg: &RunConfig, backend: &B) -> Result<Array3<f64>>
where
    B: DenoiserBackend + ?Sized,
{
    cfg.validate()?;
    let schedule = default_schedule(DEFAULT_TRAIN_STEPS)?;
    let grid = timestep_grid(DEFAULT_TRAIN_STEPS, cfg.steps)?;
    let text = backend.embed_text(&cfg.prompt);
    let null = backend.null_conditioning();
    let mut z = LatentState::new(
        normal_array3(&mut seeded_rng(cfg.seed), backend.latent_shape()),
        Timestep::Noisy(grid.first()),
        Role::Target,
    )?;
    for (t, t_next) in grid.transitions() {
        let eps_u = backend.predict_noise(&z.data, t, &null, &mut StandardAttentionHook)?;
        let eps_c = backend.predict_noise(&z.data, t, &text, &mut StandardAttentionHook)?;
        let eps = combine(&eps_u, &eps_c, &eps_u, cfg.guidance.omega1, 0.0)?;
        let z0 = tweedie_estimate(&z, &eps, &schedule)?;
        z = ddim_step_from_estimate(&z0, &eps, t_next, &schedule)?;
    }
    brighten(&clamp_unit(&backend.decode(&z.data)?), cfg.brighten_threshold)
}

/// Push every pixel strictly above the threshold to full white, leaving
/// everything at or below it untouched. Idempotent by construction.
pub fn brighten(img: &Array3<f64>, threshold: f64) -> Result<Array3<f64>> {
    if !(threshold.is_finite() && threshold > -1.0 && threshold <= 1.0) {
        return Err(M3sError::InvalidConfig(format!(
            "brighten threshold must lie in (-1, 1], got {threshold}"
        )));
    }
    Ok(img.mapv(|v| if v > threshold { 1.0 } else { v }))
}

/// Which configuration knob a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Injection smoothing weight.
    Lambda,
    /// Blend weight of the first of exactly two references; the second
    /// gets the complement.
    Eta,
    /// Content guidance weight.
    Omega1,
    /// Peak style guidance weight.
    Omega2,
    /// Regulation step size (enables regulation in every cell).
    Gamma,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::Eta => "eta",
            SweepAxis::Omega1 => "omega1",
            SweepAxis::Omega2 => "omega2",
            SweepAxis::Gamma => "gamma",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = M3sError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepAxis::Lambda),
            "eta" => Ok(SweepAxis::Eta),
            "omega1" => Ok(SweepAxis::Omega1),
            "omega2" => Ok(SweepAxis::Omega2),
            "gamma" => Ok(SweepAxis::Gamma),
            other => Err(M3sError::InvalidConfig(format!(
                "unknown sweep axis {other:?}; expected lambda, eta, omega1, omega2, or gamma"
            ))),
        }
    }
}

/// One sweep cell: the swept value and its finished synthesis.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPanel {
    pub value: f64,
    pub result: SynthesisResult,
}

fn apply_axis(base: &RunConfig, axis: SweepAxis, value: f64) -> Result<RunConfig> {
    let mut cfg = base.clone();
    match axis {
        SweepAxis::Lambda => cfg.injection.lambda = value,
        SweepAxis::Eta => {
            if cfg.references.len() != 2 {
                return Err(M3sError::InvalidConfig(format!(
                    "an eta sweep needs exactly two references, got {}",
                    cfg.references.len()
                )));
            }
            cfg.blend.eta = vec![value, 1.0 - value];
        }
        SweepAxis::Omega1 => cfg.guidance.omega1 = value,
        SweepAxis::Omega2 => cfg.guidance.omega2_max = value,
        SweepAxis::Gamma => {
            cfg.regulation.enabled = true;
            cfg.regulation.gamma = value;
        }
    }
    Ok(cfg)
}

/// Build and validate every cell configuration, sorted ascending by value.
/// All validation happens before any synthesis would start, so a bad value
/// anywhere fails the whole sweep up front.
pub fn sweep_configs(
    base: &RunConfig,
    axis: SweepAxis,
    values: &[f64],
) -> Result<Vec<(f64, RunConfig)>> {
    if values.is_empty() {
        return Err(M3sError::InvalidConfig(
            "a sweep needs at least one value".into(),
        ));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted
        .into_iter()
        .map(|v| {
            let cfg = apply_axis(base, axis, v)?;
            cfg.validate()?;
            Ok((v, cfg))
        })
        .collect()
}

/// Synthesize one panel per value, in ascending value order, sharing the
/// prepared references across cells. Panels are independent, so they run
/// in parallel; the output order is by value regardless of scheduling.
pub fn sweep<B>(
    base: &RunConfig,
    axis: SweepAxis,
    values: &[f64],
    backend: &B,
    prepared: &PreparedReferences,
) -> Result<Vec<SweepPanel>>
where
    B: DenoiserBackend + Sync + ?Sized,
{
    let cells = sweep_configs(base, axis, values)?;
    cells
        .par_iter()
        .map(|(value, cfg)| {
            synthesize_prepared(cfg, backend, prepared).map(|result| SweepPanel {
                value: *value,
                result,
            })
        })
        .collect()
}
