//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// A caller-supplied argument violates an operation's contract.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Input data is malformed (non-finite pixels, wrong value range, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A ratio was requested against an all-zero denominator.
    #[error("division by zero: {0}")]
    DivisionByZero(String),

    /// A codec parameter file is missing, unreadable, or inconsistent.
    #[error("codec load failed: {0}")]
    CodecLoad(String),

    /// An external attack adapter failed; the sub-variants are distinguishable.
    #[error("external attack failed: {0}")]
    External(#[from] ExternalError),

    /// A loss term became non-finite during training. Carries the offending
    /// term name so divergence is attributable.
    #[error("training diverged: {0}")]
    Divergence(String),

    /// Stage-1 training never pushed the smoothed extraction loss below the
    /// configured threshold. Carries the loss curve for post-mortems.
    #[error("training did not converge: {message}")]
    NonConvergence {
        message: String,
        loss_curve: Vec<f64>,
    },

    /// Checkpoint container is malformed or incompatible with this build.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Network construction produced inconsistent stage shapes.
    #[error("internal consistency: {0}")]
    Internal(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(String),
}

/// Failure modes of the external-attack adapter, each distinguishable so an
/// evaluation harness can report skipped rows precisely.
#[derive(Error, Debug)]
pub enum ExternalError {
    #[error("adapter could not be launched: {0}")]
    Launch(String),

    #[error("adapter timed out after {0} s")]
    Timeout(u64),

    #[error("adapter returned a non-zero status: {0}")]
    Failed(String),

    #[error("adapter output image is malformed: {0}")]
    MalformedOutput(String),

    #[error("adapter changed image dimensions: expected {expected}, got {got}")]
    SizeMismatch { expected: String, got: String },
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}
