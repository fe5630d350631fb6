//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("matrix of dimension {dim} is not symmetric (max |a_ij - a_ji| = {max_abs_diff:e})")]
    NotSymmetric { dim: usize, max_abs_diff: f64 },

    #[error("matrix of dimension {dim} is not positive definite after jitters {jitters:?}")]
    NotPositiveDefinite { dim: usize, jitters: Vec<f64> },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("csv parse error at row {row}: {message}")]
    CsvParse { row: usize, message: String },

    #[error(
        "infeasible split: {n_test} test individuals requested but only {n_multi} of {n_total} \
         have two or more observations ({n_singleton} singletons are forced into training)"
    )]
    InfeasibleSplit {
        n_total: usize,
        n_singleton: usize,
        n_multi: usize,
        n_test: usize,
    },

    #[error("age {age} is not a member of the working grid")]
    GridMembership { age: f64 },

    #[error("individual {id} has no hyperparameters in this model")]
    MissingIndividualParams { id: String },

    #[error("optimizer failed after {attempts} perturbed starts: {message}")]
    OptimizerFailed { attempts: usize, message: String },

    #[error("all {n} restarts failed: {details}")]
    AllRestartsFailed { n: usize, details: String },

    #[error("target age {age} outside the admissible range [{lo}, {hi}]")]
    Extrapolation { age: f64, lo: f64, hi: f64 },

    #[error("target age {age} outside the normative band span [{lo}, {hi}]")]
    OutsideBandSpan { age: f64, lo: f64, hi: f64 },

    #[error("invalid credible level {0}; must lie in (0, 1)")]
    InvalidLevel(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("model format error: {0}")]
    ModelFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
