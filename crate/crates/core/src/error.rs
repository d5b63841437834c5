//! Crate-wide error type.
//!
//! Every fallible operation in the toolkit returns [`Result`]. Variants carry
//! enough context (shapes, coordinates, parameter names) that a failure deep
//! inside a training loop or a container load is diagnosable from the message
//! alone.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two shapes that must agree do not.
    ShapeMismatch {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// An operation met a zero-sized dimension it cannot handle.
    EmptyDimension { context: &'static str },
    /// `backward` was asked to differentiate a non-scalar.
    NonScalarLoss { shape: Vec<usize> },
    /// A quantization scheme was applied to data it cannot describe
    /// (e.g. per-token granularity on a weight matrix).
    SchemeMisuse(String),
    /// A value destined for a packed int4 payload is outside `[-8, 7]`.
    Int4Range { row: usize, col: usize, value: i32 },
    /// A model, strategy, or task configuration is internally inconsistent.
    InvalidConfig(String),
    /// Training aborted; `step` is the optimizer step that failed.
    Training { step: usize, message: String },
    /// A container or CSV payload violates the format contract.
    Format(String),
    /// Underlying I/O failure (message of the original `std::io::Error`).
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { context, left, right } => {
                write!(f, "{context}: shape mismatch {left:?} vs {right:?}")
            }
            Error::EmptyDimension { context } => {
                write!(f, "{context}: dimension must be nonzero")
            }
            Error::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::SchemeMisuse(msg) => write!(f, "scheme misuse: {msg}"),
            Error::Int4Range { row, col, value } => {
                write!(f, "int4 pack: value {value} at ({row}, {col}) outside [-8, 7]")
            }
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::Training { step, message } => {
                write!(f, "training aborted at step {step}: {message}")
            }
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
