use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("infeasible activation density {density}: largest frequency would be {p_max} > 1")]
    InfeasibleDensity { density: f64, p_max: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },

    #[error("{what} = {value} is out of range ({range})")]
    OutOfRange {
        what: &'static str,
        value: f64,
        range: String,
    },

    #[error("non-finite gradient in {param} at step {step}: {detail}")]
    NonFiniteGradient {
        param: &'static str,
        step: u64,
        detail: String,
    },

    #[error("non-finite training loss at step {step}")]
    NonFiniteLoss { step: usize, history: Vec<f32> },

    #[error("row has zero norm")]
    ZeroRow,

    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },

    #[error("power iteration did not converge after {iterations} iterations (last relative change {last_change:e})")]
    ConvergenceFailure { iterations: usize, last_change: f64 },

    #[error("non-positive value {value} at point {index}")]
    NonPositiveData { index: usize, value: f64 },

    #[error("all abscissa values are equal")]
    DegenerateAbscissa,

    #[error("need at least {needed} distinct tokens with positive counts, got {got}")]
    TooFewTokens { needed: usize, got: usize },

    #[error("degenerate design: {0}")]
    DegenerateDesign(String),

    #[error("malformed file {path}: {reason} (byte offset {offset})")]
    MalformedFile {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dims(expected: impl ToString, got: impl ToString) -> Self {
        Error::DimensionMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
