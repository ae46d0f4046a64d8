use thiserror::Error;

use crate::model::Matrix;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("fixed-point iteration did not converge after {iterations} iterations (residual {residual:.3e})")]
    Divergence {
        iterations: usize,
        residual: f64,
        last_iterate: Box<Matrix>,
    },

    #[error("closed loop is unstable: gamma * rho(F)^2 = {contraction:.6} >= 1 (rho = {spectral_radius:.6})")]
    Unstable {
        spectral_radius: f64,
        contraction: f64,
    },

    #[error("dual maximization unbounded at alpha = {alpha}: q_alpha still increasing at lambda = {lambda_max:.3e}")]
    UnboundedDual { alpha: f64, lambda_max: f64 },

    #[error("degenerate market: joint gain system is singular")]
    DegenerateMarket,

    #[error("Nash iteration did not converge after {iterations} iterations (last gain change {last_change:.3e})")]
    NashDivergence {
        iterations: usize,
        last_change: f64,
        /// Max gain change per outer iteration.
        history: Vec<f64>,
    },

    #[error("simulation failed: {flagged} of {n_paths} paths produced non-finite states")]
    Simulation { flagged: usize, n_paths: usize },

    #[error("target {target} not reachable: {reason}")]
    Unreachable { target: f64, reason: String },

    #[error("i/o error on {path}: {reason}")]
    Io { path: String, reason: String },
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
