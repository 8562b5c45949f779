use std::path::PathBuf;

use thiserror::Error;

/// Errors raised while reading or writing `CAVOL1` / `CATIS1` files.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("payload truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error(
        "dimension mismatch: header declares {declared} values but payload holds {found} bytes"
    )]
    DimensionMismatch { declared: usize, found: usize },
    #[error("invalid class table: {0}")]
    ClassTable(String),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("voxel coordinate ({i}, {j}, {k}) outside grid {nx}x{ny}x{nz}")]
    OutOfBounds {
        i: usize,
        j: usize,
        k: usize,
        nx: usize,
        ny: usize,
        nz: usize,
    },
    #[error("linear index {index} outside grid of {len} voxels")]
    IndexOutOfBounds { index: usize, len: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parameter outside its domain: {0}")]
    Domain(String),
    #[error("problem too large for dense evaluation: {n} voxels (limit {limit})")]
    TooLarge { n: usize, limit: usize },
    #[error("non-finite value produced: {0}")]
    NonFinite(String),
    #[error("degenerate full conditional at voxel {0}: voxel has no neighbors")]
    DegenerateConditional(usize),
    #[error(
        "operator is not positive definite (curvature {curvature:e} at iteration {iteration})"
    )]
    Indefinite { iteration: usize, curvature: f64 },
    #[error("conjugate gradient did not converge: relative residual {residual:e} after {iterations} iterations")]
    NotConverged {
        iterations: usize,
        residual: f64,
        best: Vec<f64>,
    },
    #[error("factorization failed: {0}")]
    Factorization(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("format error in {path:?}: {source}")]
    Format {
        path: Option<PathBuf>,
        #[source]
        source: FormatError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<FormatError> for Error {
    fn from(source: FormatError) -> Self {
        Error::Format { path: None, source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
