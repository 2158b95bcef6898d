//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, RaceError>;

#[derive(Debug, Error)]
pub enum RaceError {
    /// Parameter validation failure (bad dimensions, ranges, or shapes).
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    /// A linear system could not be solved.
    #[error("singular system in {context} (condition number {condition:.3e})")]
    Singular { context: String, condition: f64 },

    /// The aggregated weighted outer-product matrix is not usably positive
    /// definite, so the global weighted least-squares solve is invalid.
    #[error("aggregation condition violated: {context} (condition number {condition:.3e})")]
    AggregationCondition { context: String, condition: f64 },

    /// An iterative solver hit its iteration cap before reaching tolerance.
    #[error("{what} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { what: String, iterations: usize, residual: f64 },

    /// Eigenvalue spectrum too close to degenerate at the requested rank cut.
    #[error("eigenvalue gap {gap:.3e} at rank boundary {rank} is below 1e-10")]
    EigenDegeneracy { rank: usize, gap: f64 },

    /// A computed variance/weight came out non-positive.
    #[error("non-positive weight encountered: {0}")]
    NonPositiveWeight(String),

    /// A simulated message tried to carry per-sample data.
    #[error("raw-data firewall violation: {0}")]
    Firewall(String),

    /// Too many per-draw solves were skipped during projection averaging.
    #[error("{skipped} of {total} projection draws failed the aggregation condition")]
    TooManySkips { skipped: usize, total: usize },

    /// A method exceeded the harness failure budget across replications.
    #[error("method {method} failed {failures} of {reps} replications")]
    TooManyFailures { method: String, failures: usize, reps: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
