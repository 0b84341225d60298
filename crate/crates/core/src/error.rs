use thiserror::Error;

/// Errors raised by the numerical routines in this crate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Cholesky hit a pivot at or below the floor while factoring the
    /// leading minor of the given order (1-based).
    #[error("matrix is not positive definite: leading minor of order {minor} has pivot {pivot:e}")]
    NotPositiveDefinite { minor: usize, pivot: f64 },

    #[error("matrix is not symmetric (relative asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("no sign change of the shape equation for c = {c} within [{lo:e}, {hi:e}]")]
    BracketNotFound { c: f64, lo: f64, hi: f64 },

    #[error("singular value decomposition failed to converge")]
    SvdFailed,

    #[error("sampler failure: {0}")]
    Sampler(String),

    #[error("matrix logarithm undefined: eigenvalue {0:e} is not positive")]
    MatrixLog(f64),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_mismatch(msg: impl Into<String>) -> Error {
    Error::DimensionMismatch(msg.into())
}
