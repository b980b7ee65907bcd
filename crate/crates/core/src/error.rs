use thiserror::Error;

use crate::mcem::McemTrace;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("privacy budget does not fit this mechanism: {0}")]
    BudgetMismatch(String),

    #[error("sensitivity profile undefined at distance k = {0}")]
    IncompleteProfile(u64),

    #[error("sensitivity profile is inconsistent: {0}")]
    InconsistentProfile(String),

    #[error("smooth sensitivity truncated at k = {k_max} cannot be certified")]
    UnverifiableSensitivity { k_max: u64 },

    #[error("sensitivity is zero; there is nothing to privatize")]
    DegenerateSensitivity,

    #[error("mechanism mismatch: query was released by {query}, sampler configured with {sampler}")]
    MechanismMismatch { query: String, sampler: String },

    #[error(
        "attempt budget exhausted: {accepted} of {requested} draws accepted after {attempts} attempts"
    )]
    BudgetExhausted {
        requested: usize,
        accepted: usize,
        attempts: u64,
    },

    #[error("acceptance probability {value} exceeds 1 (density bound too small)")]
    BoundViolation { value: f64 },

    #[error("proposal density vanishes at a drawn parameter {0:?}")]
    InvalidProposal(Vec<f64>),

    #[error("all importance weights are zero")]
    DegenerateWeights,

    #[error("model does not provide {0}")]
    MissingCapability(&'static str),

    #[error("bracket [{lo}, {hi}] does not contain an interior maximizer")]
    Bracket { lo: f64, hi: f64 },

    #[error("MCEM stage {stage} did not converge within {iterations} iterations")]
    NonConvergence {
        stage: usize,
        iterations: usize,
        trace: Box<McemTrace>,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),
}
