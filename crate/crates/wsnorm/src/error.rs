//! Crate-wide error type.
//!
//! Contract violations (shape mismatches, degenerate inputs, misuse of the
//! tape) are reported as values, not panics, so callers can surface them
//! through the CLI with a stable category.

use std::fmt;

/// Everything that can go wrong in this crate.
#[derive(Debug)]
pub enum Error {
    /// An operation received tensors whose shapes do not fit together.
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },
    /// A parameter value is outside its documented domain.
    InvalidArgument(String),
    /// A weight row is constant or zero-norm where the reparameterization
    /// needs a nonzero spread.
    DegenerateRow { context: &'static str, row: usize },
    /// A projected-gradient input does not satisfy the manifold constraints.
    ConstraintViolated(String),
    /// Batch statistics were requested over a single element
    /// (batch * spatial == 1), which leaves the variance undefined.
    SingleElementStats { batch: usize, spatial: usize },
    /// A NaN or infinity appeared where finite values are required.
    NonFinite { context: String },
    /// `backward` was called twice on the same tape.
    BackwardConsumed,
    /// `backward` was called on a non-scalar output.
    NonScalarLoss { shape: Vec<usize> },
    /// A class label is outside `0..classes`.
    LabelOutOfRange { label: usize, classes: usize, index: usize },
    /// Training aborted because the loss became non-finite.
    Diverged { step: usize },
    /// Underlying I/O failure.
    Io(std::io::Error),
    /// A config file, metrics file, or dataset file failed to parse.
    Parse(String),
    /// A checkpoint is malformed, of the wrong version, or fails its
    /// integrity check.
    Checkpoint(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch {
                context,
                expected,
                got,
            } => write!(f, "{context}: expected {expected}, got {got}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::DegenerateRow { context, row } => {
                write!(f, "{context}: row {row} is degenerate (constant or zero)")
            }
            Error::ConstraintViolated(msg) => write!(f, "constraint violated: {msg}"),
            Error::SingleElementStats { batch, spatial } => write!(
                f,
                "batch-statistics normalization cannot train on batch={batch} \
                 sample(s) (spatial={spatial}); use a channel or micro-batch norm"
            ),
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::BackwardConsumed => {
                write!(f, "backward already ran on this tape; build a new tape")
            }
            Error::NonScalarLoss { shape } => {
                write!(f, "backward needs a scalar loss, got shape {shape:?}")
            }
            Error::LabelOutOfRange { label, classes, index } => {
                write!(
                    f,
                    "label {label} at position {index} out of range for {classes} classes"
                )
            }
            Error::Diverged { step } => write!(f, "loss became non-finite at step {step}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Parse(msg) => write!(f, "parse error: {msg}"),
            Error::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

/// Stable machine-readable category for CLI exit handling.
impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io(_) => "io",
            Error::Parse(_) | Error::InvalidArgument(_) => "usage",
            Error::Checkpoint(_) => "checkpoint",
            Error::NonFinite { .. } | Error::Diverged { .. } => "numerical",
            _ => "contract",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
