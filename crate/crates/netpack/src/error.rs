//! Crate-wide error type.
//!
//! Variants mirror the failure surfaces of the toolkit: container parsing
//! (format/corruption/manifest), caller mistakes (argument/shape), config and
//! plan files, statistics that cannot be fit, and plain I/O.

use thiserror::Error;

/// Any failure produced by this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// The byte stream is not a container we understand (bad magic,
    /// unsupported version).
    #[error("invalid container format: {0}")]
    Format(String),

    /// The container was recognized but its contents are damaged
    /// (truncation, checksum mismatch).
    #[error("corrupted container: {0}")]
    Corrupt(String),

    /// The container manifest is self-inconsistent (duplicate layer names,
    /// shape/payload disagreement, unknown enum tags).
    #[error("manifest error: {0}")]
    Manifest(String),

    /// A function was called with values outside its domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A quantization spec or descriptor config is unusable.
    #[error("config error: {0}")]
    Config(String),

    /// A weight-tying plan does not match the network it is applied to.
    #[error("tying plan error: {0}")]
    Plan(String),

    /// Tensor or feature-map dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A statistic is undefined for the given data (e.g. fitting a scale
    /// parameter to a constant sample).
    #[error("degenerate distribution: {0}")]
    Degenerate(String),

    /// A line-oriented text input (descriptor lists, relevance judgments)
    /// failed to parse.
    #[error("text input error: {0}")]
    Parse(String),

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;
