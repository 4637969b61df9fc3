use thiserror::Error;

/// Errors raised by construction, evaluation and the iteration engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite logit at state {state}, action slot {slot}")]
    NonFiniteLogit { state: usize, slot: usize },

    #[error("solver did not converge after {iterations} sweeps (last residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("state space too small: {required} states required, {requested} requested")]
    Sizing { required: usize, requested: usize },

    #[error("outside the required regime: {0}")]
    OutsideRegime(String),

    #[error("cannot collapse: {0}")]
    Collapse(String),

    #[error("run aborted at iteration {iteration}: {reason}")]
    RunAborted { iteration: u64, reason: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;
