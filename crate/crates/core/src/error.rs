use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpiderError {
    #[error("unsupported: n = {n} has no closed form; open problem (the sqrt(n+1) pattern is conjectured to fail at n = 3)")]
    UnsupportedN { n: usize },

    #[error("domain violation: {0}")]
    DomainViolation(String),

    #[error("dimension mismatch: expected {expected} ribs, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("excessive censoring: {fraction:.6} of paths hit max_steps (threshold {threshold})")]
    ExcessiveCensoring { fraction: f64, threshold: f64 },

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: u64, residual: f64 },

    #[error("truncation contaminates the solution: values near the S_max face moved by {movement:e} (tol {tol:e})")]
    TruncationContaminated { movement: f64, tol: f64 },

    #[error("degenerate grid: {0}")]
    DegenerateGrid(String),

    #[error("cannot parse rule '{0}': expected first-entry:C=.., drawdown:a=.., fixed-time:t=.. or sum-threshold:b=..")]
    RuleParse(String),
}

pub type Result<T> = std::result::Result<T, SpiderError>;
