//! Denoiser backend contract.
//!
//! The sampler needs four things from a diffusion backbone: a noise
//! prediction conditioned on an embedding and evaluated at an explicit
//! timestep, encode/decode between image and latent space, a vector-Jacobian
//! product through decode (for latent-space regulation), and a hook point
//! inside every self-attention layer so reference features can be captured
//! and injected without the backbone knowing about either.
//!
//! The built-in [`toy::ToyDenoiser`] implements the full contract with
//! fixed seeded weights; adapters for real backbones implement the same
//! trait and may decline the optional capabilities.

pub mod toy;

use ndarray::{Array1, Array2, Array3};

use crate::attention::{standard_attention, AttentionFeatures};
use crate::error::{M3sError, Result};

/// Where an attention layer sits in the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerLocation {
    Encoder,
    Middle,
    Decoder,
}

/// What a conditioning embedding stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditioningKind {
    Text,
    Null,
}

/// Conditioning input for a noise prediction: either an embedded prompt or
/// the backend's distinguished null embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub kind: ConditioningKind,
    pub embedding: Array1<f64>,
}

/// One injectable self-attention layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerDescriptor {
    pub id: usize,
    /// Spatial resolution of the token grid at this layer.
    pub resolution: (usize, usize),
    pub location: LayerLocation,
}

/// Receives every self-attention evaluation. Implementations may record the
/// projected features, replace the attention output, or both; returning
/// [`standard_attention`] of the given features reproduces the backbone
/// unchanged.
pub trait AttentionHook {
    /// `timestep` is the training timestep the backbone is being evaluated
    /// at (which, during inversion, can differ from the latent's own tag).
    fn attention(
        &mut self,
        layer: &LayerDescriptor,
        timestep: usize,
        features: &AttentionFeatures,
    ) -> Result<Array2<f64>>;
}

/// The do-nothing hook: plain attention everywhere.
#[derive(Debug, Default, Clone, Copy)]
pub struct StandardAttentionHook;

impl AttentionHook for StandardAttentionHook {
    fn attention(
        &mut self,
        _layer: &LayerDescriptor,
        _timestep: usize,
        features: &AttentionFeatures,
    ) -> Result<Array2<f64>> {
        standard_attention(features)
    }
}

/// A diffusion backbone the sampler can drive.
pub trait DenoiserBackend {
    /// Short stable identifier ("toy", adapter names, ...).
    fn name(&self) -> &str;

    /// Latent tensor shape (channels, height, width).
    fn latent_shape(&self) -> (usize, usize, usize);

    /// Decoded image shape (channels, height, width).
    fn image_shape(&self) -> (usize, usize, usize);

    /// Width of conditioning embeddings.
    fn conditioning_dim(&self) -> usize;

    /// The unconditional (null) conditioning; reproducible across calls.
    fn null_conditioning(&self) -> Conditioning;

    /// Deterministic embedding of a prompt string.
    fn embed_text(&self, prompt: &str) -> Conditioning;

    /// Self-attention layers, in evaluation order.
    fn attention_layers(&self) -> &[LayerDescriptor];

    /// Predict the noise in `z` at training timestep `t` under `cond`,
    /// routing every self-attention evaluation through `hook`.
    fn predict_noise(
        &self,
        z: &Array3<f64>,
        t: usize,
        cond: &Conditioning,
        hook: &mut dyn AttentionHook,
    ) -> Result<Array3<f64>>;

    /// Decode a latent to an image.
    fn decode(&self, latent: &Array3<f64>) -> Result<Array3<f64>>;

    /// Encode an image to a latent. Optional; needed to prepare references.
    fn encode(&self, _image: &Array3<f64>) -> Result<Array3<f64>> {
        Err(M3sError::MissingCapability("encode"))
    }

    /// Pull an image-space cotangent back through decode at `latent`:
    /// returns `J_decode(latent)^T @ cotangent`. Optional; needed for
    /// edge regulation.
    fn decode_vjp(&self, _latent: &Array3<f64>, _cotangent: &Array3<f64>) -> Result<Array3<f64>> {
        Err(M3sError::MissingCapability("decode_vjp"))
    }
}
