//! Error types shared across the crate.

use thiserror::Error;

/// All failure modes surfaced by the library.
///
/// The CLI prints these as a single `error: <kind>: <detail>` line and exits
/// nonzero, so the variant names double as machine-parsable reason codes.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes or extents do not satisfy an operation's contract.
    #[error("dimension: {0}")]
    Dim(String),

    /// A computation produced (or was handed) a NaN/Inf value.
    #[error("numeric: {0}")]
    Numeric(String),

    /// A file does not follow its declared binary or text format.
    #[error("format: {0}")]
    Format(String),

    /// Two inputs that must agree (e.g. image and label counts) do not.
    #[error("consistency: {0}")]
    Consistency(String),

    /// An argument is outside its legal range.
    #[error("parameter: {0}")]
    Parameter(String),

    /// A layer was driven out of order (e.g. backward before forward).
    #[error("state: {0}")]
    State(String),

    /// A run configuration is incomplete or self-contradictory.
    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
