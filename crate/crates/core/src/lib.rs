//! Exact Kiefer-Weiss optimal sequential tests for a Bernoulli success probability.

pub mod backward;
pub mod baselines;
pub mod error;
pub mod evaluate;
pub mod model;
pub mod optimize;
pub mod solve;

pub use backward::{build_plan, effective_horizon, horizon_bound, Action, LagrangeConfig, Plan};
pub use error::{KwError, Result};
pub use model::{Hypotheses, LatticeState};
