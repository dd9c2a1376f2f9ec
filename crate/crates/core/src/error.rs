use thiserror::Error;

use crate::model::Violation;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("matrix is not hermitian (max deviation {0:e})")]
    NotHermitian(f64),

    #[error("invalid density matrix: {0}")]
    InvalidState(String),

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("model validation failed: {}", format_violations(.0))]
    Validation(Vec<Violation>),

    #[error("config error: {0}")]
    Config(String),

    #[error("|Υ(u)| = {0:e} is below the diffusive threshold")]
    UpsilonTooSmall(f64),

    #[error("|Ξ(u)| = {0:e} is below the counting threshold")]
    XiTooSmall(f64),

    #[error("jump intensity too large for the step: λ·dt = {0}")]
    IntensityTooLarge(f64),

    #[error("operation requires {expected} observation mode")]
    ModeMismatch { expected: &'static str },

    #[error("control {u} outside admissible range [{min}, {max}]")]
    ControlOutOfRange { u: f64, min: f64, max: f64 },

    #[error("Kraus completeness violated: defect {0:e}")]
    Completeness(f64),

    #[error("invalid time grid: {0}")]
    TimeGrid(String),

    #[error("transition probability {0} outside [0, 1]")]
    Probability(f64),

    #[error("dynamic programming: {0}")]
    Bellman(String),

    #[error("empty ensemble")]
    EmptyEnsemble,

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

pub type Result<T> = std::result::Result<T, Error>;
