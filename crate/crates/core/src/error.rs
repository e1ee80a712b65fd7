use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("attention mask row {row} has no visible entry")]
    FullyMaskedRow { row: usize },
    #[error("zero-norm row {row} in cosine similarity")]
    ZeroNorm { row: usize },
    #[error("support mismatch at row {row}, column {col}: reference mass where the approximation is zero")]
    SupportMismatch { row: usize, col: usize },
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Stable identifier for the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidShape(_) => "invalid_shape",
            Error::FullyMaskedRow { .. } => "fully_masked_row",
            Error::ZeroNorm { .. } => "zero_norm",
            Error::SupportMismatch { .. } => "support_mismatch",
            Error::NonScalarRoot(_) => "non_scalar_root",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Unsupported(_) => "unsupported",
            Error::Divergence { .. } => "divergence",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
