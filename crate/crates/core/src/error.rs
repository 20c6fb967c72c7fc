//! Crate-wide error type.
//!
//! Shape errors between tensors are bugs in the calling code and panic with a
//! message naming both shapes. Everything data-dependent (non-finite values,
//! malformed files, impossible scene specs, bad configs) flows through
//! [`Error`] so the CLI can report it and exit nonzero.

/// Recoverable error raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An API contract was violated by the caller (e.g. backward on a
    /// non-scalar, asking for attention weights in a mode that has none).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A NaN or infinity showed up where a finite value is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A scene specification that cannot be satisfied.
    #[error("scene spec error: {0}")]
    Scene(String),

    /// Caller-supplied data is semantically unusable (e.g. evaluating AP
    /// against a target set with zero boxes).
    #[error("invalid input: {0}")]
    Input(String),

    /// A file had the wrong syntax or layout (CSV, config, checkpoint).
    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
