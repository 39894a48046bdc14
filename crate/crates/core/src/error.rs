use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("infeasible problem: n*C = {n_c} < 1 (n = {n}, C = {c})")]
    InfeasibleProblem { n: usize, c: f64, n_c: f64 },

    #[error(
        "too few points: got {got}, need at least {need} \
         (ceil(1/C) = {ceil_inv_c}, warmup = {warmup}, minimum 2)"
    )]
    TooFewPoints {
        got: usize,
        need: usize,
        ceil_inv_c: usize,
        warmup: usize,
    },

    #[error("matrix is not symmetric: |K[{i}][{j}] - K[{j}][{i}]| = {diff:e}")]
    NotSymmetric { i: usize, j: usize, diff: f64 },

    #[error("margin set is empty")]
    EmptyMarginSet,

    #[error("constraint violation: sum of alpha = {sum} (expected 1)")]
    ConstraintViolation { sum: f64 },

    #[error("internal solver error: {0}")]
    Internal(String),

    #[error("csv error at row {row}, column {col}: {msg}")]
    CsvCell { row: usize, col: usize, msg: String },

    #[error("csv error: {0}")]
    Csv(String),

    #[error("model schema error: {0}")]
    Schema(String),

    #[error("unsupported model format version {found} (this build reads version {expected})")]
    UnsupportedVersion { found: i64, expected: i64 },

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
