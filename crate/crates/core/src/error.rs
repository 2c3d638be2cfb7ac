use thiserror::Error;

use crate::linalg::LinalgError;

#[derive(Debug, Error)]
pub enum MpcError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("LCP has no admissible active set")]
    Infeasible,
    #[error("relu(y) differs from the multipliers by {0:e}")]
    ReconstructionMismatch(f64),
    #[error("active set {0:?} has linearly dependent constraints")]
    SingularActiveSet(Vec<usize>),
    #[error("no feasible cost candidate: {0}")]
    NotFound(String),
    #[error("region {region} closed loop has spectral radius {radius}")]
    UnstableRegion { region: usize, radius: f64 },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MpcError>;
