//! Training-free multi-style sketch synthesis.
//!
//! The sampler steers a frozen latent-diffusion denoiser at inference time
//! with three cooperating mechanisms: reference K/V features injected into
//! self-attention (with linear smoothing against the target features),
//! joint AdaIN modulation of the latent toward a weighted blend of
//! reference statistics, and a split classifier-free guidance term that
//! weights style and content directions independently. An optional
//! edge-energy regulation step sharpens stroke structure during denoising.
//!
//! Everything runs deterministically at desk scale on the built-in
//! [`backend::toy::ToyDenoiser`]; real backbones plug in through the
//! [`backend::DenoiserBackend`] trait.

pub mod attention;
pub mod backend;
pub mod cache;
pub mod error;
pub mod evaluate;
pub mod guidance;
pub mod image_io;
pub mod modulation;
pub mod pipeline;
pub mod reference;
pub mod regulation;
pub mod scheduler;
mod util;

pub use error::{M3sError, Result};
