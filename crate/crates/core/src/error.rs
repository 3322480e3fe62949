use thiserror::Error;

use crate::problems::ProblemKind;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error("constraint violated at step {step}: {constraint}")]
    ConstraintViolation { step: usize, constraint: String },
    #[error("incomplete solution: state is not terminal")]
    IncompleteSolution,
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("out of range: {0}")]
    Range(String),
    #[error("capacity exceeded for {kind}: {detail}")]
    Capacity { kind: ProblemKind, detail: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("instance of size {n} exceeds the exact-solver budget of {limit}; use the heuristic solver")]
    SizeLimit { n: usize, limit: usize },
    #[error("cache order violated: position {got} after {last}")]
    CacheOrder { got: usize, last: usize },
    #[error("environment contract violated: {0}")]
    EnvContract(String),
    #[error("token budget exceeded: need {need}, max {max}")]
    Length { need: usize, max: usize },
    #[error("degenerate baseline: expert and random objectives coincide ({0})")]
    DegenerateBaseline(f64),
    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("file error: {0}")]
    File(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable code, also used as the CLI exit status.
    pub fn code(&self) -> i32 {
        match self {
            Error::InvalidSize(_) => 10,
            Error::ConstraintViolation { .. } => 11,
            Error::IncompleteSolution => 12,
            Error::InvalidValue(_) => 13,
            Error::Range(_) => 14,
            Error::Capacity { .. } => 15,
            Error::Shape(_) => 16,
            Error::Config(_) => 17,
            Error::SizeLimit { .. } => 18,
            Error::CacheOrder { .. } => 19,
            Error::EnvContract(_) => 20,
            Error::Length { .. } => 21,
            Error::DegenerateBaseline(_) => 22,
            Error::Compatibility(_) => 23,
            Error::Divergence(_) => 24,
            Error::File(_) => 25,
            Error::Io(_) => 26,
            Error::Json(_) => 27,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Error::InvalidSize(_) => "invalid_size",
            Error::ConstraintViolation { .. } => "constraint_violation",
            Error::IncompleteSolution => "incomplete_solution",
            Error::InvalidValue(_) => "invalid_value",
            Error::Range(_) => "range",
            Error::Capacity { .. } => "capacity",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::SizeLimit { .. } => "size_limit",
            Error::CacheOrder { .. } => "cache_order",
            Error::EnvContract(_) => "env_contract",
            Error::Length { .. } => "length",
            Error::DegenerateBaseline(_) => "degenerate_baseline",
            Error::Compatibility(_) => "compatibility",
            Error::Divergence(_) => "divergence",
            Error::File(_) => "file",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
