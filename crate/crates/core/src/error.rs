//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Non-finite or otherwise unusable numeric input.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Shape or length mismatch.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A token distance exceeded the configured maximum span M.
    #[error("span exceeded: distance {delta} is larger than max span {max}")]
    SpanExceeded { delta: f64, max: f64 },

    /// Negative token distance where causal ordering was required.
    #[error("causality violation: {0}")]
    Causality(String),

    /// Parameter outside its valid range.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Inconsistent or unknown configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Softmax attention is not separable; transformer kinds cannot stream.
    #[error("mixer kind `{0}` has no recurrent form")]
    NoRecurrentForm(String),

    /// A streamed position moved backwards in time.
    #[error("out-of-order position: {got} precedes last seen {last}")]
    OutOfOrder { got: f64, last: f64 },

    /// Target distance for the forecaster must be strictly positive.
    #[error("invalid delta: {0} (must be > 0)")]
    InvalidDelta(f64),

    /// Malformed serialized payload; `offset` is the failing byte position.
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: u64, msg: String },

    /// Checkpoint contents do not match the requested model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training diverged.
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
