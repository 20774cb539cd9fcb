// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the toolkit.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Checkpoint missing, unreadable or corrupt.
    #[error("failed to load model from `{locator}`: {reason}")]
    Load { locator: String, reason: String },

    /// Backend or architecture not supported by this build.
    #[error("unsupported capability: {0}")]
    Capability(String),

    /// Shape or dimension mismatch.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Prompt longer than the model context window.
    #[error("prompt of {len} tokens exceeds context length {max}")]
    ContextLength { len: usize, max: usize },

    /// Requested activation was not captured in the trace.
    #[error("missing capture: {0}")]
    MissingCapture(String),

    /// Index outside a valid range (layer, head, position, token id).
    #[error("index out of range: {0}")]
    Index(String),

    /// Input violates an operation precondition.
    #[error("domain error: {0}")]
    Domain(String),

    /// Dataset record failed schema validation.
    #[error("validation error in {record}: {reason}")]
    Validation { record: String, reason: String },

    /// Lookup of an unknown key (language, relation, ...).
    #[error("unknown key: {0}")]
    Key(String),

    /// Invalid split request (unknown held-out relation, bad fractions).
    #[error("split spec error: {0}")]
    Spec(String),

    /// Not enough data to satisfy a request.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Clean and corrupted runs assign (nearly) the same target probability.
    #[error("degenerate AIE gap: |P[o] - P*[o]| = {gap:e}")]
    DegenerateGap { gap: f64 },

    /// No length-matched counterfactual subject exists.
    #[error("no counterpart: {0}")]
    NoCounterpart(String),

    /// Subject or relation span could not be located in the prompt.
    #[error("position resolution failed: {0}")]
    PositionResolution(String),

    /// Artifacts computed on different models.
    #[error("fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },

    /// Reports cannot be compared.
    #[error("comparability error: {0}")]
    Comparability(String),

    /// External judge could not be reached or answered malformed data.
    #[error("judge unavailable: {0}")]
    JudgeUnavailable(String),

    /// Malformed binary container.
    #[error("container format error: {0}")]
    Format(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
