//! Error type shared across the library.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, M3sError>;

#[derive(Debug, Error)]
pub enum M3sError {
    /// Tensor arguments disagree on shape.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    /// A configuration value is out of its documented range.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// An operation was called with arguments violating its preconditions.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A training timestep lies outside the schedule.
    #[error("timestep {t} out of range for a schedule with {len} training steps")]
    TimestepOutOfRange { t: usize, len: usize },

    /// AdaIN met a channel whose spread is too small to normalize.
    #[error("degenerate channel {channel}: standard deviation {sigma:e} is at or below the {floor:e} floor")]
    DegenerateChannel {
        channel: usize,
        sigma: f64,
        floor: f64,
    },

    /// Injection asked for reference features that were never captured.
    #[error("feature cache miss at layer {layer_id}, timestep {timestep}")]
    CacheMiss { layer_id: usize, timestep: usize },

    /// An explicit layer selection named an id the backend does not expose.
    #[error("unknown attention layer id {id}; valid ids: {valid:?}")]
    UnknownLayer { id: usize, valid: Vec<usize> },

    /// The backend does not implement an optional capability.
    #[error("backend capability missing: {0}")]
    MissingCapability(&'static str),

    /// A serialized artifact is malformed.
    #[error("cache format error: {0}")]
    CacheFormat(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
