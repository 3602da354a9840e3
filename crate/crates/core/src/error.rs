//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid model or experiment configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor or distribution shape mismatch.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Behavioral module and core parameters are not compatible.
    #[error("incompatible module: {0}")]
    Compatibility(String),

    /// Operation applied in the wrong module lifecycle state.
    #[error("lifecycle error: {0}")]
    Lifecycle(String),

    /// Scalar argument outside its documented range.
    #[error("out of range: {0}")]
    Range(String),

    /// Mismatched prompt sets or reports that do not share a baseline.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Hard failure: an invariant of the evaluation protocol was broken.
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),

    /// Training produced a non-finite loss.
    #[error("numerical divergence: {0}")]
    NumericalDivergence(String),

    /// Invalid experiment spec (bad grid, unknown field, wrong kind).
    #[error("spec error: {0}")]
    Spec(String),

    /// Precondition violated by the caller.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Replay produced output that differs from the stored record.
    #[error("replay mismatch: {0}")]
    ReplayMismatch(String),

    /// Malformed checkpoint or module file.
    #[error("file format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
