use thiserror::Error;

/// Errors produced by the propagation, objective and optimization routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("matrix is singular to working precision")]
    Singular,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("augmented dimension {dim} exceeds the supermatrix cap {cap}")]
    CapExceeded { dim: usize, cap: usize },

    #[error("truncation order {order} is too low, need at least {required}")]
    InsufficientOrder { order: usize, required: usize },

    #[error("unsupported finite-difference order {0}; only total order <= 2 is available")]
    UnsupportedOrder(usize),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
