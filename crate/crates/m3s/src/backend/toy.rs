//! Built-in toy denoiser: a small fixed-weight backbone that exercises the
//! full sampling stack deterministically on one CPU core.
//!
//! Architecture, per prediction: `num_attention_layers` blocks of per-pixel
//! channel mixing (tanh of a channel mix plus conditioning and timestep
//! biases) each followed by genuine softmax self-attention over the
//! flattened spatial tokens, then a linear head. The prediction is anchored
//! at `sqrt(1 - abar_t) * z`, the optimal noise estimate when clean latents
//! are standard normal; the network contributes a bounded structured
//! residual on top. Without the anchor a fixed random network cannot keep
//! full-schedule trajectories in a sane range.
//!
//! Decode is rank-one: `image[i,j] = sum_c u_c * latent[c,i,j]` for a fixed
//! unit vector `u`, so `encode` (its transpose) is an exact right inverse
//! and the decode vector-Jacobian product is exact rather than approximated.
//!
//! All weights are drawn from one seeded stream in a fixed order; the draw
//! order is part of the backend's identity, since reordering it would
//! change every frozen output.

use ndarray::{Array1, Array2, Array3};

use super::{
    AttentionHook, Conditioning, ConditioningKind, DenoiserBackend, LayerDescriptor, LayerLocation,
};
use crate::attention::AttentionFeatures;
use crate::error::{M3sError, Result};
use crate::scheduler::{
    build_schedule, ScheduleKind, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_TRAIN_STEPS,
};
use crate::util::{fnv1a64, normal_array1, normal_array2, seeded_rng};

/// Default weight seed; changing it defines a different toy model.
pub const DEFAULT_WEIGHT_SEED: u64 = 0x6d33_7331;
/// Default latent geometry: 4 channels over an 8x8 grid.
pub const DEFAULT_LATENT_SHAPE: (usize, usize, usize) = (4, 8, 8);
/// Default number of self-attention layers.
pub const DEFAULT_ATTENTION_LAYERS: usize = 2;

const COND_DIM: usize = 8;
/// `[1, tau, tau^2, sin(2 pi tau), cos(2 pi tau)]`.
const TIME_FEATURES: usize = 5;

/// Scale of text embeddings relative to a unit normal.
const EMBED_SCALE: f64 = 0.5;
/// Conditioning bias weights are kept small so that heavily amplified
/// guidance differences stay within the latent's working range.
const COND_WEIGHT_SCALE: f64 = 0.05;
const TIME_WEIGHT_SCALE: f64 = 0.15;
/// Attention residual scale.
const ATTN_OUT_SCALE: f64 = 0.5;
/// Structured (non-anchor) share of the prediction.
const HEAD_SCALE: f64 = 0.3;
const HEAD_BIAS_SCALE: f64 = 0.02;

struct Block {
    mix: Array2<f64>,
    w_cond: Array2<f64>,
    w_time: Array2<f64>,
    w_q: Array2<f64>,
    w_k: Array2<f64>,
    w_v: Array2<f64>,
    w_o: Array2<f64>,
}

pub struct ToyDenoiser {
    channels: usize,
    height: usize,
    width: usize,
    train_steps: usize,
    /// `sqrt(1 - abar_t)` per training timestep.
    anchor: Vec<f64>,
    layers: Vec<LayerDescriptor>,
    blocks: Vec<Block>,
    w_out: Array2<f64>,
    b_out: Array1<f64>,
    /// Unit vector defining the rank-one decode.
    basis: Array1<f64>,
}

impl ToyDenoiser {
    pub fn new(
        weight_seed: u64,
        latent_shape: (usize, usize, usize),
        num_attention_layers: usize,
    ) -> Result<Self> {
        let (channels, height, width) = latent_shape;
        if channels == 0 || height == 0 || width == 0 {
            return Err(M3sError::InvalidConfig(format!(
                "toy latent shape must have nonzero extents, got {latent_shape:?}"
            )));
        }
        if num_attention_layers == 0 {
            return Err(M3sError::InvalidConfig(
                "toy backend needs at least one attention layer".into(),
            ));
        }
        let train_steps = DEFAULT_TRAIN_STEPS;
        let schedule = build_schedule(
            train_steps,
            DEFAULT_BETA_START,
            DEFAULT_BETA_END,
            ScheduleKind::Linear,
        )?;
        let anchor = schedule
            .alpha_bars()
            .iter()
            .map(|&ab| (1.0 - ab).sqrt())
            .collect();

        let mut rng = seeded_rng(weight_seed);
        let unit = 1.0 / (channels as f64).sqrt();
        let blocks = (0..num_attention_layers)
            .map(|_| Block {
                mix: normal_array2(&mut rng, channels, channels, unit),
                w_cond: normal_array2(&mut rng, channels, COND_DIM, COND_WEIGHT_SCALE),
                w_time: normal_array2(&mut rng, channels, TIME_FEATURES, TIME_WEIGHT_SCALE),
                w_q: normal_array2(&mut rng, channels, channels, unit),
                w_k: normal_array2(&mut rng, channels, channels, unit),
                w_v: normal_array2(&mut rng, channels, channels, unit),
                w_o: normal_array2(&mut rng, channels, channels, ATTN_OUT_SCALE * unit),
            })
            .collect();
        let w_out = normal_array2(&mut rng, channels, channels, HEAD_SCALE * unit);
        let b_out = normal_array1(&mut rng, channels, HEAD_BIAS_SCALE);
        let mut basis = normal_array1(&mut rng, channels, 1.0);
        let norm = basis.dot(&basis).sqrt();
        basis.mapv_inplace(|v| v / norm);

        let layers = (0..num_attention_layers)
            .map(|id| LayerDescriptor {
                id,
                resolution: (height, width),
                location: LayerLocation::Decoder,
            })
            .collect();

        Ok(Self {
            channels,
            height,
            width,
            train_steps,
            anchor,
            layers,
            blocks,
            w_out,
            b_out,
            basis,
        })
    }

    fn check_latent(&self, z: &Array3<f64>, context: &'static str) -> Result<()> {
        if z.dim() != self.latent_shape() {
            return Err(M3sError::ShapeMismatch {
                context,
                expected: format!("{:?}", self.latent_shape()),
                actual: format!("{:?}", z.dim()),
            });
        }
        Ok(())
    }

    fn check_image(&self, img: &Array3<f64>, context: &'static str) -> Result<()> {
        if img.dim() != self.image_shape() {
            return Err(M3sError::ShapeMismatch {
                context,
                expected: format!("{:?}", self.image_shape()),
                actual: format!("{:?}", img.dim()),
            });
        }
        Ok(())
    }
}

impl Default for ToyDenoiser {
    fn default() -> Self {
        Self::new(
            DEFAULT_WEIGHT_SEED,
            DEFAULT_LATENT_SHAPE,
            DEFAULT_ATTENTION_LAYERS,
        )
        .expect("default construction uses valid constants")
    }
}

/// Flatten (channels, h, w) to (h*w, channels) token rows.
fn to_tokens(h: &Array3<f64>) -> Array2<f64> {
    let (c, height, width) = h.dim();
    let mut out = Array2::zeros((height * width, c));
    for ch in 0..c {
        for i in 0..height {
            for j in 0..width {
                out[[i * width + j, ch]] = h[[ch, i, j]];
            }
        }
    }
    out
}

fn from_tokens(x: &Array2<f64>, shape: (usize, usize, usize)) -> Array3<f64> {
    let (c, height, width) = shape;
    let mut out = Array3::zeros(shape);
    for ch in 0..c {
        for i in 0..height {
            for j in 0..width {
                out[[ch, i, j]] = x[[i * width + j, ch]];
            }
        }
    }
    out
}

fn time_features(t: usize, train_steps: usize) -> Array1<f64> {
    let tau = if train_steps > 1 {
        t as f64 / (train_steps - 1) as f64
    } else {
        0.0
    };
    let two_pi = 2.0 * std::f64::consts::PI;
    Array1::from_vec(vec![
        1.0,
        tau,
        tau * tau,
        (two_pi * tau).sin(),
        (two_pi * tau).cos(),
    ])
}

impl DenoiserBackend for ToyDenoiser {
    fn name(&self) -> &str {
        "toy"
    }

    fn latent_shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    fn image_shape(&self) -> (usize, usize, usize) {
        (1, self.height, self.width)
    }

    fn conditioning_dim(&self) -> usize {
        COND_DIM
    }

    fn null_conditioning(&self) -> Conditioning {
        Conditioning {
            kind: ConditioningKind::Null,
            embedding: Array1::zeros(COND_DIM),
        }
    }

    fn embed_text(&self, prompt: &str) -> Conditioning {
        let mut rng = seeded_rng(fnv1a64(prompt.as_bytes()));
        Conditioning {
            kind: ConditioningKind::Text,
            embedding: normal_array1(&mut rng, COND_DIM, EMBED_SCALE),
        }
    }

    fn attention_layers(&self) -> &[LayerDescriptor] {
        &self.layers
    }

    fn predict_noise(
        &self,
        z: &Array3<f64>,
        t: usize,
        cond: &Conditioning,
        hook: &mut dyn AttentionHook,
    ) -> Result<Array3<f64>> {
        self.check_latent(z, "predict_noise latent")?;
        if t >= self.train_steps {
            return Err(M3sError::TimestepOutOfRange {
                t,
                len: self.train_steps,
            });
        }
        if cond.embedding.len() != COND_DIM {
            return Err(M3sError::ShapeMismatch {
                context: "predict_noise conditioning",
                expected: format!("{COND_DIM}"),
                actual: format!("{}", cond.embedding.len()),
            });
        }

        let phi = time_features(t, self.train_steps);
        let mut h = z.clone();
        for (block, layer) in self.blocks.iter().zip(&self.layers) {
            let cond_bias = block.w_cond.dot(&cond.embedding);
            let time_bias = block.w_time.dot(&phi);
            let mut mixed = Array3::zeros(h.dim());
            for i in 0..self.height {
                for j in 0..self.width {
                    for c in 0..self.channels {
                        let mut acc = cond_bias[c] + time_bias[c];
                        for (cp, &w) in block.mix.row(c).iter().enumerate() {
                            acc += w * h[[cp, i, j]];
                        }
                        mixed[[c, i, j]] = acc.tanh();
                    }
                }
            }
            h = mixed;

            let x = to_tokens(&h);
            let features =
                AttentionFeatures::new(x.dot(&block.w_q), x.dot(&block.w_k), x.dot(&block.w_v))?;
            let out = hook.attention(layer, t, &features)?;
            if out.dim() != (self.height * self.width, self.channels) {
                return Err(M3sError::ShapeMismatch {
                    context: "attention hook output",
                    expected: format!("{:?}", (self.height * self.width, self.channels)),
                    actual: format!("{:?}", out.dim()),
                });
            }
            h += &from_tokens(&out.dot(&block.w_o), h.dim());
        }

        let anchor = self.anchor[t];
        let mut eps = Array3::zeros(z.dim());
        for i in 0..self.height {
            for j in 0..self.width {
                for c in 0..self.channels {
                    let mut acc = self.b_out[c];
                    for (cp, &w) in self.w_out.row(c).iter().enumerate() {
                        acc += w * h[[cp, i, j]];
                    }
                    eps[[c, i, j]] = anchor * z[[c, i, j]] + acc;
                }
            }
        }
        Ok(eps)
    }

    fn decode(&self, latent: &Array3<f64>) -> Result<Array3<f64>> {
        self.check_latent(latent, "decode latent")?;
        let mut img = Array3::zeros(self.image_shape());
        for i in 0..self.height {
            for j in 0..self.width {
                let mut acc = 0.0;
                for c in 0..self.channels {
                    acc += self.basis[c] * latent[[c, i, j]];
                }
                img[[0, i, j]] = acc;
            }
        }
        Ok(img)
    }

    fn encode(&self, image: &Array3<f64>) -> Result<Array3<f64>> {
        self.check_image(image, "encode image")?;
        let mut z = Array3::zeros(self.latent_shape());
        for i in 0..self.height {
            for j in 0..self.width {
                for c in 0..self.channels {
                    z[[c, i, j]] = self.basis[c] * image[[0, i, j]];
                }
            }
        }
        Ok(z)
    }

    fn decode_vjp(&self, latent: &Array3<f64>, cotangent: &Array3<f64>) -> Result<Array3<f64>> {
        self.check_latent(latent, "decode_vjp latent")?;
        self.check_image(cotangent, "decode_vjp cotangent")?;
        // decode is linear, so its transpose is exactly the encode map
        self.encode(cotangent)
    }
}
