//! Scaled dot-product attention with reference feature injection.
//!
//! `attention(Q, K, V) = softmax(Q K^T / sqrt(d_k)) V`, rows of Q/K/V are
//! tokens. Injection swaps or concatenates reference K/V behind the target
//! queries; the smoothed variant first interpolates each reference toward
//! the target, `K_hat = lambda K_tar + (1 - lambda) K_ref` (same `lambda`
//! for V), so `lambda = 1` degenerates to duplicated target features and
//! softmax duplication invariance makes the output match plain attention.
//!
//! Multi-head backbones apply this machinery per head; a features value
//! here is one head's matrices.

use std::collections::BTreeSet;

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::backend::{LayerDescriptor, LayerLocation};
use crate::error::{M3sError, Result};
use crate::modulation::adain_columns;

/// One self-attention evaluation's projected features (rows are tokens).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionFeatures {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
}

impl AttentionFeatures {
    pub fn new(q: Array2<f64>, k: Array2<f64>, v: Array2<f64>) -> Result<Self> {
        if q.ncols() == 0 {
            return Err(M3sError::InvalidInput("attention requires d_k > 0".into()));
        }
        if q.ncols() != k.ncols() {
            return Err(M3sError::ShapeMismatch {
                context: "attention q/k width",
                expected: format!("{}", q.ncols()),
                actual: format!("{}", k.ncols()),
            });
        }
        if k.nrows() != v.nrows() {
            return Err(M3sError::ShapeMismatch {
                context: "attention k/v rows",
                expected: format!("{}", k.nrows()),
                actual: format!("{}", v.nrows()),
            });
        }
        Ok(Self { q, k, v })
    }

    pub fn q(&self) -> &Array2<f64> {
        &self.q
    }

    pub fn k(&self) -> &Array2<f64> {
        &self.k
    }

    pub fn v(&self) -> &Array2<f64> {
        &self.v
    }

    pub fn d_k(&self) -> usize {
        self.q.ncols()
    }
}

/// Reference features for one layer/timestep/reference triple. Queries are
/// only captured (and only needed) for the AdaIN-aligned mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceFeatures {
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub q: Option<Array2<f64>>,
}

/// How reference features enter self-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InjectionMode {
    /// No injection; standard attention.
    #[default]
    None,
    /// Replace K/V with a single reference's features.
    KvSwap,
    /// Append raw reference K/V behind the target's.
    Concat,
    /// Append references smoothed toward the target (the default method).
    ConcatSmoothed,
    /// AdaIN-align target Q/K to the first reference's statistics, then
    /// concatenate.
    AdainQkConcat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InjectionConfig {
    pub mode: InjectionMode,
    /// Smoothing weight on the target features, in `[0, 1]`.
    pub lambda: f64,
    /// Attention layers to inject at; `None` means every layer the backend
    /// exposes.
    pub layer_ids: Option<BTreeSet<usize>>,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            mode: InjectionMode::None,
            lambda: 0.1,
            layer_ids: None,
        }
    }
}

impl InjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && (0.0..=1.0).contains(&self.lambda)) {
            return Err(M3sError::InvalidConfig(format!(
                "smoothing lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    /// Concrete layer set for a backend: `layer_ids` if given (validated
    /// against the backend), otherwise every exposed layer.
    pub fn resolved_layer_ids(&self, layers: &[LayerDescriptor]) -> Result<BTreeSet<usize>> {
        match &self.layer_ids {
            Some(ids) => select_layers(layers, &LayerPolicy::Explicit(ids.clone())),
            None => Ok(layers.iter().map(|l| l.id).collect()),
        }
    }
}

/// Row-wise numerically stable softmax.
fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Plain scaled dot-product attention.
pub fn standard_attention(features: &AttentionFeatures) -> Result<Array2<f64>> {
    let scale = 1.0 / (features.d_k() as f64).sqrt();
    let mut scores = features.q.dot(&features.k.t());
    scores.mapv_inplace(|v| v * scale);
    softmax_rows(&mut scores);
    Ok(scores.dot(&features.v))
}

/// Interpolate reference features toward the target:
/// `lambda * target + (1 - lambda) * reference`. The endpoints return the
/// corresponding argument bitwise.
pub fn smooth_features(
    target: &Array2<f64>,
    reference: &Array2<f64>,
    lambda: f64,
) -> Result<Array2<f64>> {
    if !(lambda.is_finite() && (0.0..=1.0).contains(&lambda)) {
        return Err(M3sError::InvalidConfig(format!(
            "smoothing lambda must lie in [0, 1], got {lambda}"
        )));
    }
    if target.dim() != reference.dim() {
        return Err(M3sError::ShapeMismatch {
            context: "smooth_features",
            expected: format!("{:?}", target.dim()),
            actual: format!("{:?}", reference.dim()),
        });
    }
    if lambda == 1.0 {
        return Ok(target.clone());
    }
    if lambda == 0.0 {
        return Ok(reference.clone());
    }
    let mut out = target.clone();
    ndarray::Zip::from(&mut out)
        .and(reference)
        .for_each(|o, &r| *o = lambda * *o + (1.0 - lambda) * r);
    Ok(out)
}

/// Run one attention evaluation with reference features injected according
/// to `cfg.mode`. `refs` holds one entry per reference, in reference order.
pub fn injected_attention(
    target: &AttentionFeatures,
    refs: &[ReferenceFeatures],
    cfg: &InjectionConfig,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    match cfg.mode {
        InjectionMode::None => standard_attention(target),
        InjectionMode::KvSwap => {
            if refs.len() != 1 {
                return Err(M3sError::InvalidInput(format!(
                    "kv_swap takes exactly one reference, got {}",
                    refs.len()
                )));
            }
            let f = AttentionFeatures::new(
                target.q.clone(),
                refs[0].k.clone(),
                refs[0].v.clone(),
            )?;
            standard_attention(&f)
        }
        InjectionMode::Concat => {
            require_refs("concat", refs)?;
            let (k, v) = concat_kv(target.k(), target.v(), refs, None)?;
            let f = AttentionFeatures::new(target.q.clone(), k, v)?;
            standard_attention(&f)
        }
        InjectionMode::ConcatSmoothed => {
            require_refs("concat_smoothed", refs)?;
            let (k, v) = concat_kv(target.k(), target.v(), refs, Some(cfg.lambda))?;
            let f = AttentionFeatures::new(target.q.clone(), k, v)?;
            standard_attention(&f)
        }
        InjectionMode::AdainQkConcat => {
            require_refs("adain_qk_concat", refs)?;
            let q_ref = refs[0].q.as_ref().ok_or_else(|| {
                M3sError::InvalidInput(
                    "adain_qk_concat needs cached reference queries; rebuild the cache with query capture".into(),
                )
            })?;
            let q = adain_columns(target.q(), q_ref)?;
            let k_tar = adain_columns(target.k(), &refs[0].k)?;
            let (k, v) = concat_kv(&k_tar, target.v(), refs, None)?;
            let f = AttentionFeatures::new(q, k, v)?;
            standard_attention(&f)
        }
    }
}

fn require_refs(mode: &str, refs: &[ReferenceFeatures]) -> Result<()> {
    if refs.is_empty() {
        return Err(M3sError::InvalidInput(format!(
            "{mode} needs at least one reference"
        )));
    }
    Ok(())
}

/// Stack target K/V with each reference's, optionally smoothing references
/// toward the target first.
fn concat_kv(
    k_tar: &Array2<f64>,
    v_tar: &Array2<f64>,
    refs: &[ReferenceFeatures],
    lambda: Option<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut ks: Vec<Array2<f64>> = vec![k_tar.clone()];
    let mut vs: Vec<Array2<f64>> = vec![v_tar.clone()];
    for (i, r) in refs.iter().enumerate() {
        if r.k.ncols() != k_tar.ncols() || r.v.ncols() != v_tar.ncols() {
            return Err(M3sError::ShapeMismatch {
                context: "reference feature width",
                expected: format!("k:{} v:{}", k_tar.ncols(), v_tar.ncols()),
                actual: format!("k:{} v:{} (reference {i})", r.k.ncols(), r.v.ncols()),
            });
        }
        match lambda {
            Some(l) => {
                ks.push(smooth_features(k_tar, &r.k, l)?);
                vs.push(smooth_features(v_tar, &r.v, l)?);
            }
            None => {
                ks.push(r.k.clone());
                vs.push(r.v.clone());
            }
        }
    }
    let k_views: Vec<_> = ks.iter().map(|m| m.view()).collect();
    let v_views: Vec<_> = vs.iter().map(|m| m.view()).collect();
    let k = concatenate(Axis(0), &k_views).map_err(|e| {
        M3sError::InvalidInput(format!("failed to stack reference keys: {e}"))
    })?;
    let v = concatenate(Axis(0), &v_views).map_err(|e| {
        M3sError::InvalidInput(format!("failed to stack reference values: {e}"))
    })?;
    Ok((k, v))
}

/// How to pick injection layers from a backend's descriptor list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerPolicy {
    /// Decoder-side layers whose spatial resolution is in the set.
    ByResolution(BTreeSet<(usize, usize)>),
    /// Exactly these ids; unknown ids are rejected.
    Explicit(BTreeSet<usize>),
}

/// Resolve a layer policy against a backend's exposed attention layers.
pub fn select_layers(
    layers: &[LayerDescriptor],
    policy: &LayerPolicy,
) -> Result<BTreeSet<usize>> {
    match policy {
        LayerPolicy::ByResolution(resolutions) => Ok(layers
            .iter()
            .filter(|l| l.location == LayerLocation::Decoder && resolutions.contains(&l.resolution))
            .map(|l| l.id)
            .collect()),
        LayerPolicy::Explicit(ids) => {
            let valid: BTreeSet<usize> = layers.iter().map(|l| l.id).collect();
            for &id in ids {
                if !valid.contains(&id) {
                    return Err(M3sError::UnknownLayer {
                        id,
                        valid: valid.into_iter().collect(),
                    });
                }
            }
            Ok(ids.clone())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::{normal_array2, seeded_rng};
    use ndarray::array;

    fn random_features(seed: u64, tokens: usize, d_k: usize, d_v: usize) -> AttentionFeatures {
        let mut rng = seeded_rng(seed);
        AttentionFeatures::new(
            normal_array2(&mut rng, tokens, d_k, 1.0),
            normal_array2(&mut rng, tokens, d_k, 1.0),
            normal_array2(&mut rng, tokens, d_v, 1.0),
        )
        .unwrap()
    }

    fn max_abs(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn single_key_attends_fully_to_its_value() {
        let f = AttentionFeatures::new(
            array![[0.3, -0.7]],
            array![[1.0, 2.0]],
            array![[5.0, -1.0, 2.0]],
        )
        .unwrap();
        let out = standard_attention(&f).unwrap();
        assert_eq!(out, array![[5.0, -1.0, 2.0]]);
    }

    #[test]
    fn hand_softmax_value() {
        // logits (1/sqrt(2), 0): weights (0.66985, 0.33015) -> 1.33015...
        let f = AttentionFeatures::new(
            array![[1.0, 0.0]],
            array![[1.0, 0.0], [0.0, 1.0]],
            array![[1.0], [2.0]],
        )
        .unwrap();
        let out = standard_attention(&f).unwrap();
        assert!((out[[0, 0]] - 1.3302385).abs() < 1e-3, "got {}", out[[0, 0]]);
    }

    #[test]
    fn duplicated_keys_and_values_change_nothing() {
        for seed in 0..20 {
            let f = random_features(seed, 6, 4, 3);
            let dup = AttentionFeatures::new(
                f.q().clone(),
                concatenate(Axis(0), &[f.k().view(), f.k().view()]).unwrap(),
                concatenate(Axis(0), &[f.v().view(), f.v().view()]).unwrap(),
            )
            .unwrap();
            let base = standard_attention(&f).unwrap();
            let doubled = standard_attention(&dup).unwrap();
            assert!(max_abs(&base, &doubled) < 1e-6);
        }
    }

    #[test]
    fn feature_validation_errors() {
        assert!(AttentionFeatures::new(
            Array2::zeros((1, 0)),
            Array2::zeros((1, 0)),
            Array2::zeros((1, 1))
        )
        .is_err());
        assert!(AttentionFeatures::new(
            Array2::zeros((1, 2)),
            Array2::zeros((3, 3)),
            Array2::zeros((3, 1))
        )
        .is_err());
        assert!(AttentionFeatures::new(
            Array2::zeros((1, 2)),
            Array2::zeros((3, 2)),
            Array2::zeros((2, 1))
        )
        .is_err());
    }

    #[test]
    fn smoothing_endpoints_are_bitwise() {
        let mut rng = seeded_rng(4);
        let t = normal_array2(&mut rng, 5, 3, 1.0);
        let r = normal_array2(&mut rng, 5, 3, 1.0);
        assert_eq!(smooth_features(&t, &r, 1.0).unwrap(), t);
        assert_eq!(smooth_features(&t, &r, 0.0).unwrap(), r);
        assert!(smooth_features(&t, &r, 1.5).is_err());
        assert!(smooth_features(&t, &r, -0.1).is_err());
    }

    #[test]
    fn smoothing_midpoint_hand_value() {
        let t = array![[2.0]];
        let r = array![[4.0]];
        assert_eq!(smooth_features(&t, &r, 0.5).unwrap(), array![[3.0]]);
    }

    #[test]
    fn mode_none_is_standard_attention_bitwise() {
        let f = random_features(9, 4, 3, 3);
        let cfg = InjectionConfig::default();
        let out = injected_attention(&f, &[], &cfg).unwrap();
        assert_eq!(out, standard_attention(&f).unwrap());
    }

    #[test]
    fn kv_swap_uses_reference_features_only() {
        let f = random_features(10, 4, 3, 3);
        let r = random_features(11, 4, 3, 3);
        let cfg = InjectionConfig {
            mode: InjectionMode::KvSwap,
            ..Default::default()
        };
        let refs = [ReferenceFeatures {
            k: r.k().clone(),
            v: r.v().clone(),
            q: None,
        }];
        let out = injected_attention(&f, &refs, &cfg).unwrap();
        let swapped =
            AttentionFeatures::new(f.q().clone(), r.k().clone(), r.v().clone()).unwrap();
        assert_eq!(out, standard_attention(&swapped).unwrap());

        // arity errors
        assert!(injected_attention(&f, &[], &cfg).is_err());
        let two = [refs[0].clone(), refs[0].clone()];
        assert!(injected_attention(&f, &two, &cfg).is_err());
    }

    #[test]
    fn fully_smoothed_references_degenerate_to_standard_attention() {
        for seed in 0..20 {
            let f = random_features(100 + seed, 5, 4, 4);
            let r1 = random_features(200 + seed, 5, 4, 4);
            let r2 = random_features(300 + seed, 5, 4, 4);
            let refs = [
                ReferenceFeatures {
                    k: r1.k().clone(),
                    v: r1.v().clone(),
                    q: None,
                },
                ReferenceFeatures {
                    k: r2.k().clone(),
                    v: r2.v().clone(),
                    q: None,
                },
            ];
            let cfg = InjectionConfig {
                mode: InjectionMode::ConcatSmoothed,
                lambda: 1.0,
                layer_ids: None,
            };
            let out = injected_attention(&f, &refs, &cfg).unwrap();
            let base = standard_attention(&f).unwrap();
            assert!(max_abs(&out, &base) < 1e-6);
        }
    }

    #[test]
    fn zero_lambda_smoothed_concat_equals_raw_concat_bitwise() {
        let f = random_features(12, 4, 3, 3);
        let r = random_features(13, 4, 3, 3);
        let refs = [ReferenceFeatures {
            k: r.k().clone(),
            v: r.v().clone(),
            q: None,
        }];
        let smoothed = InjectionConfig {
            mode: InjectionMode::ConcatSmoothed,
            lambda: 0.0,
            layer_ids: None,
        };
        let raw = InjectionConfig {
            mode: InjectionMode::Concat,
            ..Default::default()
        };
        assert_eq!(
            injected_attention(&f, &refs, &smoothed).unwrap(),
            injected_attention(&f, &refs, &raw).unwrap()
        );
    }

    #[test]
    fn concat_against_brute_force_single_token() {
        // one query token, one target key and two reference keys: weights and
        // output computed directly from the softmax definition
        let f = AttentionFeatures::new(array![[1.0]], array![[0.5]], array![[2.0]]).unwrap();
        let refs = [
            ReferenceFeatures {
                k: array![[1.0]],
                v: array![[-1.0]],
                q: None,
            },
            ReferenceFeatures {
                k: array![[-0.5]],
                v: array![[4.0]],
                q: None,
            },
        ];
        let cfg = InjectionConfig {
            mode: InjectionMode::Concat,
            ..Default::default()
        };
        let out = injected_attention(&f, &refs, &cfg).unwrap();
        let logits: [f64; 3] = [0.5, 1.0, -0.5];
        let exps: Vec<f64> = logits.iter().map(|l| l.exp()).collect();
        let z: f64 = exps.iter().sum();
        let expect = (exps[0] * 2.0 - exps[1] + exps[2] * 4.0) / z;
        assert!((out[[0, 0]] - expect).abs() < 1e-12);
    }

    #[test]
    fn smoothed_output_is_continuous_in_lambda() {
        for seed in 0..10 {
            let f = random_features(400 + seed, 5, 3, 3);
            let r = random_features(500 + seed, 5, 3, 3);
            let refs = [ReferenceFeatures {
                k: r.k().clone(),
                v: r.v().clone(),
                q: None,
            }];
            let at = |l: f64| {
                let cfg = InjectionConfig {
                    mode: InjectionMode::ConcatSmoothed,
                    lambda: l,
                    layer_ids: None,
                };
                injected_attention(&f, &refs, &cfg).unwrap()
            };
            let base = at(0.4);
            let nudged = at(0.4 + 1e-6);
            assert!(max_abs(&base, &nudged) < 1e-3);
        }
    }

    #[test]
    fn adain_aligned_mode_needs_reference_queries() {
        let f = random_features(14, 6, 4, 4);
        let r = random_features(15, 6, 4, 4);
        let cfg = InjectionConfig {
            mode: InjectionMode::AdainQkConcat,
            ..Default::default()
        };
        let without_q = [ReferenceFeatures {
            k: r.k().clone(),
            v: r.v().clone(),
            q: None,
        }];
        assert!(injected_attention(&f, &without_q, &cfg).is_err());

        let with_q = [ReferenceFeatures {
            k: r.k().clone(),
            v: r.v().clone(),
            q: Some(r.q().clone()),
        }];
        let out = injected_attention(&f, &with_q, &cfg).unwrap();
        // differs from plain concat because Q/K were re-normalized
        let concat_cfg = InjectionConfig {
            mode: InjectionMode::Concat,
            ..Default::default()
        };
        let plain = injected_attention(&f, &with_q, &concat_cfg).unwrap();
        assert!(max_abs(&out, &plain) > 0.0);
    }

    #[test]
    fn lambda_validation_rejects_out_of_range() {
        let cfg = InjectionConfig {
            lambda: 1.2,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    fn descriptors() -> Vec<LayerDescriptor> {
        vec![
            LayerDescriptor {
                id: 0,
                resolution: (8, 8),
                location: LayerLocation::Decoder,
            },
            LayerDescriptor {
                id: 1,
                resolution: (8, 8),
                location: LayerLocation::Decoder,
            },
            LayerDescriptor {
                id: 2,
                resolution: (16, 16),
                location: LayerLocation::Decoder,
            },
            LayerDescriptor {
                id: 3,
                resolution: (8, 8),
                location: LayerLocation::Encoder,
            },
        ]
    }

    #[test]
    fn resolution_policy_selects_matching_decoder_layers() {
        let layers = descriptors();
        let picked = select_layers(
            &layers,
            &LayerPolicy::ByResolution([(8usize, 8usize)].into_iter().collect()),
        )
        .unwrap();
        assert_eq!(picked.into_iter().collect::<Vec<_>>(), vec![0, 1]);

        let none = select_layers(&layers, &LayerPolicy::ByResolution(BTreeSet::new())).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn explicit_policy_validates_ids() {
        let layers = descriptors();
        let picked = select_layers(
            &layers,
            &LayerPolicy::Explicit([0usize, 2, 3].into_iter().collect()),
        )
        .unwrap();
        assert_eq!(picked.into_iter().collect::<Vec<_>>(), vec![0, 2, 3]);
        match select_layers(&layers, &LayerPolicy::Explicit([9usize].into_iter().collect())) {
            Err(M3sError::UnknownLayer { id, valid }) => {
                assert_eq!(id, 9);
                assert_eq!(valid, vec![0, 1, 2, 3]);
            }
            other => panic!("expected unknown-layer error, got {other:?}"),
        }
    }
}
