//! Reference preparation: invert each style image up the sampling grid and
//! capture its attention features at every grid timestep.
//!
//! Inversion runs the deterministic sampler backwards under null
//! conditioning. Each ascent queries the backbone at the destination
//! timestep, so replaying the recorded predictions downward reproduces the
//! clean latent up to floating-point rounding — the trajectory is
//! self-consistent by construction, which the tests pin.
//!
//! Feature capture costs one extra backbone evaluation per (grid timestep,
//! reference) pair: a hook records the projected Q/K/V at the requested
//! layers while the prediction itself is discarded.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::attention::{standard_attention, AttentionFeatures};
use crate::backend::{AttentionHook, DenoiserBackend, LayerDescriptor, StandardAttentionHook};
use crate::cache::FeatureCache;
use crate::error::{M3sError, Result};
use crate::scheduler::{ddim_invert_step, LatentState, NoiseSchedule, Role, Timestep, TimestepGrid};
use crate::util::atomic_write;

/// File magic for serialized reference trajectories.
const TRAJECTORY_MAGIC: &[u8; 6] = b"M3STR1";

/// One reference image's inverted latent trajectory: the clean encoding
/// plus a latent at every grid timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceBundle {
    pub index: usize,
    pub trajectory: BTreeMap<Timestep, LatentState>,
}

impl ReferenceBundle {
    pub fn state_at(&self, t: Timestep) -> Result<&LatentState> {
        self.trajectory.get(&t).ok_or_else(|| {
            M3sError::InvalidInput(format!(
                "reference {} has no trajectory state at {t}",
                self.index
            ))
        })
    }
}

/// Encode a reference image and climb it up the grid with null-conditioned
/// predictions, recording every state along the way.
pub fn invert_reference<B>(
    index: usize,
    image: &Array3<f64>,
    backend: &B,
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
) -> Result<ReferenceBundle>
where
    B: DenoiserBackend + ?Sized,
{
    if image.dim() != backend.image_shape() {
        return Err(M3sError::ShapeMismatch {
            context: "reference image",
            expected: format!("{:?}", backend.image_shape()),
            actual: format!("{:?} (reference {index})", image.dim()),
        });
    }
    let null = backend.null_conditioning();
    let mut current = LatentState::new(backend.encode(image)?, Timestep::Clean, Role::Reference)?;
    let mut trajectory = BTreeMap::new();
    trajectory.insert(current.timestep, current.clone());
    for (from, to) in grid.ascents() {
        debug_assert_eq!(from, current.timestep);
        let eps = backend.predict_noise(&current.data, to, &null, &mut StandardAttentionHook)?;
        current = ddim_invert_step(&current, &eps, Timestep::Noisy(to), schedule)?;
        trajectory.insert(current.timestep, current.clone());
    }
    Ok(ReferenceBundle { index, trajectory })
}

/// Invert every reference image in order.
pub fn prepare_references<B>(
    images: &[Array3<f64>],
    backend: &B,
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
) -> Result<Vec<ReferenceBundle>>
where
    B: DenoiserBackend + ?Sized,
{
    images
        .iter()
        .enumerate()
        .map(|(i, img)| invert_reference(i, img, backend, schedule, grid))
        .collect()
}

/// One captured layer visit: (layer id, Q, K, V).
type CapturedQkv = (usize, Array2<f64>, Array2<f64>, Array2<f64>);

/// Records projected attention features at selected layers while leaving
/// the backbone's computation untouched.
struct CaptureHook<'a> {
    targets: &'a BTreeSet<usize>,
    captured: Vec<CapturedQkv>,
}

impl AttentionHook for CaptureHook<'_> {
    fn attention(
        &mut self,
        layer: &LayerDescriptor,
        _timestep: usize,
        features: &AttentionFeatures,
    ) -> Result<Array2<f64>> {
        if self.targets.contains(&layer.id) {
            self.captured.push((
                layer.id,
                features.q().clone(),
                features.k().clone(),
                features.v().clone(),
            ));
        }
        standard_attention(features)
    }
}

/// Run one null-conditioned backbone evaluation per (grid timestep,
/// reference) on the stored trajectory latents and collect the K/V (and Q)
/// features at `layer_ids` into a cache.
pub fn build_feature_cache<B>(
    bundles: &[ReferenceBundle],
    backend: &B,
    grid: &TimestepGrid,
    layer_ids: &BTreeSet<usize>,
) -> Result<FeatureCache>
where
    B: DenoiserBackend + ?Sized,
{
    let valid: BTreeSet<usize> = backend.attention_layers().iter().map(|l| l.id).collect();
    for &id in layer_ids {
        if !valid.contains(&id) {
            return Err(M3sError::UnknownLayer {
                id,
                valid: valid.iter().copied().collect(),
            });
        }
    }
    let null = backend.null_conditioning();
    let mut cache = FeatureCache::new();
    for &t in grid.steps() {
        for bundle in bundles {
            let state = bundle.state_at(Timestep::Noisy(t))?;
            let mut hook = CaptureHook {
                targets: layer_ids,
                captured: Vec::new(),
            };
            backend.predict_noise(&state.data, t, &null, &mut hook)?;
            for (layer_id, q, k, v) in &hook.captured {
                cache.insert(*layer_id, t, bundle.index, k, v, Some(q))?;
            }
        }
    }
    Ok(cache)
}

fn timestep_code(t: Timestep) -> i64 {
    match t {
        Timestep::Clean => -1,
        Timestep::Noisy(t) => t as i64,
    }
}

/// Serialize bundles to bytes: magic, entry count, then per state the
/// reference index, timestep code (-1 for clean), dims, and f64 data.
pub fn trajectories_to_bytes(bundles: &[ReferenceBundle]) -> Vec<u8> {
    let count: usize = bundles.iter().map(|b| b.trajectory.len()).sum();
    let mut buf = Vec::with_capacity(TRAJECTORY_MAGIC.len() + 8 + count * 64);
    buf.extend_from_slice(TRAJECTORY_MAGIC);
    buf.extend_from_slice(&(count as u64).to_le_bytes());
    for bundle in bundles {
        for (&t, state) in &bundle.trajectory {
            buf.extend_from_slice(&(bundle.index as u32).to_le_bytes());
            buf.extend_from_slice(&timestep_code(t).to_le_bytes());
            let (c, h, w) = state.shape();
            for dim in [c, h, w] {
                buf.extend_from_slice(&(dim as u32).to_le_bytes());
            }
            for &v in state.data.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            M3sError::CacheFormat("trajectory store: truncated".into())
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Inverse of [`trajectories_to_bytes`]. Reference indices must form a
/// contiguous block starting at zero.
pub fn trajectories_from_bytes(bytes: &[u8]) -> Result<Vec<ReferenceBundle>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(TRAJECTORY_MAGIC.len())? != TRAJECTORY_MAGIC {
        return Err(M3sError::CacheFormat(
            "trajectory store: bad magic, not a trajectory file".into(),
        ));
    }
    let count = r.u64()?;
    let mut grouped: BTreeMap<usize, BTreeMap<Timestep, LatentState>> = BTreeMap::new();
    for _ in 0..count {
        let index = r.u32()? as usize;
        let code = r.i64()?;
        let timestep = match code {
            -1 => Timestep::Clean,
            t if t >= 0 => Timestep::Noisy(t as usize),
            t => {
                return Err(M3sError::CacheFormat(format!(
                    "trajectory store: invalid timestep code {t}"
                )))
            }
        };
        let (c, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let len = c
            .checked_mul(h)
            .and_then(|x| x.checked_mul(w))
            .filter(|&x| x > 0)
            .ok_or_else(|| {
                M3sError::CacheFormat(format!("trajectory store: bad dims ({c}, {h}, {w})"))
            })?;
        let raw = r.take(len * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(M3sError::CacheFormat(
                "trajectory store: non-finite latent values".into(),
            ));
        }
        let arr = Array3::from_shape_vec((c, h, w), data)
            .expect("length was computed from the dims");
        let state = LatentState::new(arr, timestep, Role::Reference)?;
        if grouped.entry(index).or_default().insert(timestep, state).is_some() {
            return Err(M3sError::CacheFormat(format!(
                "trajectory store: duplicate state for reference {index} at {timestep}"
            )));
        }
    }
    if r.pos != bytes.len() {
        return Err(M3sError::CacheFormat(
            "trajectory store: trailing bytes".into(),
        ));
    }
    for (expect, &actual) in grouped.keys().enumerate() {
        if expect != actual {
            return Err(M3sError::CacheFormat(format!(
                "trajectory store: reference indices must be contiguous from 0, found {actual}"
            )));
        }
    }
    Ok(grouped
        .into_iter()
        .map(|(index, trajectory)| ReferenceBundle { index, trajectory })
        .collect())
}

pub fn save_trajectories(path: &Path, bundles: &[ReferenceBundle]) -> Result<()> {
    atomic_write(path, &trajectories_to_bytes(bundles))
}

pub fn load_trajectories(path: &Path) -> Result<Vec<ReferenceBundle>> {
    trajectories_from_bytes(&std::fs::read(path)?)
}
