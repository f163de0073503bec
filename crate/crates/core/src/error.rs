use thiserror::Error;

use crate::cmatrix::MatrixError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(transparent)]
    Matrix(#[from] MatrixError),

    #[error("invalid POVM: {0}")]
    InvalidPovm(String),

    #[error("invalid density matrix: {0}")]
    InvalidDensity(String),

    #[error("density factor has vanishing norm ({norm:e})")]
    DegenerateFactor { norm: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("probability {value:e} is negative beyond tolerance")]
    NegativeProbability { value: f64 },

    #[error("enumeration needs {needed} items, budget is {budget}")]
    BudgetExceeded { needed: u128, budget: u128 },

    #[error("linear program failed: {0}")]
    Lp(String),

    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown game `{0}`")]
    UnknownGame(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;
