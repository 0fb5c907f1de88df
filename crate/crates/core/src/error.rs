use thiserror::Error;

use crate::expr::ExprError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("rank deficient: {0}")]
    RankDeficient(String),
    #[error("point is off the stratum `{stratum}` (residual {residual:e})")]
    OffSet { stratum: String, residual: f64 },
    #[error("no convergence: {0}")]
    NoConvergence(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("budget exhausted: {0}")]
    Budget(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("function is constant on the samples: {0}")]
    Constant(String),
    #[error("level set is empty")]
    EmptyLevel,
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
