use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("{path}: no rows")]
    NoRows { path: PathBuf },

    #[error("{path}: row {row} has {found} columns, expected {expected}")]
    RaggedRow {
        path: PathBuf,
        row: usize,
        found: usize,
        expected: usize,
    },

    #[error("{path}: cannot parse {cell:?} as a number at (row {row}, column {column})")]
    ParseCell {
        path: PathBuf,
        row: usize,
        column: usize,
        cell: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected} columns, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error(
        "covariance is numerically singular (minimum eigenvalue {min_eigenvalue:e}); add a ridge"
    )]
    SingularCovariance { min_eigenvalue: f64 },

    #[error("column {column} has zero variance; correlation is undefined")]
    ZeroVariance { column: usize },

    #[error(
        "quantized outputs are rank deficient (minimum covariance eigenvalue {min_eigenvalue:e}); \
         use more quantization levels or fewer output dimensions"
    )]
    RankDeficient { min_eigenvalue: f64 },

    #[error(
        "conditional row {row} vanished after exponentiation; try a smaller distortion multiplier"
    )]
    VanishingConditional { row: usize },

    #[error("moment constraints are infeasible on the reproduction support: {0}")]
    Infeasible(String),

    #[error(
        "distortion bound {bound} is below the minimum achievable {achievable} on this support"
    )]
    DistortionTooSmall { bound: f64, achievable: f64 },

    #[error("did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("degenerate variance in {0}")]
    DegenerateVariance(String),

    #[error("model format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("model file is corrupt: {0}")]
    Corrupt(String),

    #[error("repetition {repetition}: {source}")]
    Repetition {
        repetition: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
