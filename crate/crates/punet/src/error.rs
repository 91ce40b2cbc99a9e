//! Crate-wide error type.

/// Errors produced by tensor operations, model construction, training, and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible (broadcasting, channel counts, ...).
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    /// An input violated a mathematical domain constraint (log of a
    /// non-positive value, label out of range, ...).
    #[error("domain error: {0}")]
    Domain(String),
    /// A configuration value is invalid (bad architecture name, empty split,
    /// output size below one, ...).
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    /// A computation produced or would produce non-finite values.
    #[error("numerical overflow: {0}")]
    NumericalOverflow(String),
    /// Misuse of the autodiff tape (non-scalar loss, tape already consumed,
    /// variables from different tapes).
    #[error("graph error: {0}")]
    Graph(String),
    /// A file did not match its expected binary or on-disk layout.
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
