//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the irisrank library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty score set")]
    EmptyScoreSet,

    #[error("undefined for single-class input: {0}")]
    SingleClass(&'static str),

    #[error("AUC term undefined: minibatch contains a single class")]
    SingleClassBatch,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("config/checkpoint mismatch: checkpoint digest {checkpoint} != current {current}")]
    DigestMismatch { checkpoint: String, current: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("image error for {source_id}: {reason}")]
    ImageLoad { source_id: String, reason: String },

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("insufficient samples for requested ratio {requested}: at most {achievable} achievable")]
    InsufficientSamples {
        requested: String,
        achievable: String,
    },

    #[error("bundle directory is locked by another invocation: {0}")]
    BundleLocked(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
