//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("empty or dimensionless samples")]
    EmptySamples,

    #[error("sample/grid size mismatch: expected {expected}, got {got}")]
    SizeMismatch { expected: usize, got: usize },

    #[error("integrand is not mean-free: |mean| = {residual:.3e} exceeds {tolerance:.3e} * scale")]
    NotMeanFree { residual: f64, tolerance: f64 },

    #[error("change-of-variable order {0} unsupported (supported: 1..=3)")]
    UnsupportedOrder(usize),

    #[error("fixed-point iteration diverged: residual {residual:.3e} after {iterations} iterations")]
    FixedPointDiverged { residual: f64, iterations: usize },

    #[error("implicit step diverged at step {step}: residual {residual:.3e}; try a smaller dt")]
    StepDiverged { step: usize, residual: f64 },

    #[error("micro-macro requires standard averaging, got stroboscopic flavor")]
    FlavorMismatch,

    #[error("step size underflow at t = {t:.6e} (h = {h:.3e}); the problem looks stiff on this formulation")]
    StepSizeUnderflow { t: f64, h: f64 },

    #[error("step {step} failed: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, Error>;
