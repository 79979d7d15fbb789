use thiserror::Error;

/// Errors raised by the filtering library and the experiment harness.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("matrix is not positive definite (pivot {pivot:.3e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("degenerate ensemble: {0}")]
    DegenerateEnsemble(String),

    #[error("measurement model is singular at this state: {0}")]
    SingularPoint(String),

    #[error("argument outside its domain: {0}")]
    DomainError(String),

    #[error("all importance weights underflowed to zero")]
    WeightCollapse,

    #[error("invalid configuration: {0}")]
    ConfigError(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for FilterError {
    fn from(err: std::io::Error) -> Self {
        FilterError::Io(err.to_string())
    }
}

pub type Result<T, E = FilterError> = std::result::Result<T, E>;
