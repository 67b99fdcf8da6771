use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KwError {
    #[error("{name} = {value} is outside the open interval (0, 1)")]
    Domain { name: &'static str, value: f64 },

    #[error("invalid hypotheses: theta0 = {theta0} must be strictly below theta1 = {theta1}")]
    Hypotheses { theta0: f64, theta1: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("lattice state (n = {n}, s = {s}) is invalid: need n >= 1 and s <= n")]
    State { n: usize, s: usize },

    #[error("degenerate linear system in horizon bound")]
    Singular,

    #[error("plan needs horizon {required}, above the limit of {limit} stages")]
    HorizonLimit { required: usize, limit: usize },

    #[error("stopping distribution sums to {sum}, not 1")]
    Unnormalized { sum: f64 },

    #[error("SPRT residual mass {residual:e} still above tolerance after {stages} stages")]
    NonAbsorption { residual: f64, stages: usize },

    #[error("no convergence after {iterations} iterations: {detail}")]
    NonConvergence {
        iterations: usize,
        detail: String,
        /// Best iterate of the multiplier search, when there is one.
        best: Option<Box<crate::solve::SolveReport>>,
    },
}

pub type Result<T> = std::result::Result<T, KwError>;
