use thiserror::Error;

/// Errors produced by the numerical layer.
#[derive(Debug, Error)]
pub enum SmpError {
    /// Invalid configuration or parameter out of its admissible range.
    #[error("configuration error: {0}")]
    Config(String),

    /// A non-finite value appeared during simulation; the first offending
    /// location is reported.
    #[error("numerical blow-up at path {path}, step {step}")]
    BlowUp { path: usize, step: usize },

    /// An iterative scheme did not reach its tolerance within the iteration
    /// budget. Carries the full gap sequence for diagnostics.
    #[error("no convergence after {iterations} iterations (last gap {last:e})", last = gaps.last().copied().unwrap_or(f64::NAN))]
    NoConvergence { iterations: usize, gaps: Vec<f64> },

    /// The fixed-point gap sequence grew for several consecutive sweeps.
    #[error("contraction failure: gap sequence diverging, ratios {ratios:?}")]
    ContractionFailure { gaps: Vec<f64>, ratios: Vec<f64> },

    /// A conditional-expectation regression could not be fitted.
    #[error("estimation error: {0}")]
    Estimation(String),

    /// A supplied analytic partial disagrees with its finite-difference probe.
    #[error("coefficient validation failed: {0}")]
    CoefficientValidation(String),
}

pub type Result<T> = std::result::Result<T, SmpError>;
