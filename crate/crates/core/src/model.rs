//! Bernoulli likelihoods on the success-count lattice.
//!
//! After `n` observations with `s` successes the joint likelihood is
//! `θ^s (1-θ)^(n-s)`; the binomially scaled weight multiplies it by
//! `C(n, s)`. Every recursion in the crate works with the scaled weights,
//! which stay in `[0, 1]` and never overflow.

use std::sync::{Arc, OnceLock, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{KwError, Result};

pub(crate) fn check_probability(name: &'static str, value: f64) -> Result<f64> {
    if value > 0.0 && value < 1.0 {
        Ok(value)
    } else {
        Err(KwError::Domain { name, value })
    }
}

/// A simple null `θ = θ0` against a simple alternative `θ = θ1`, `θ0 < θ1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawHypotheses")]
pub struct Hypotheses {
    theta0: f64,
    theta1: f64,
}

#[derive(Deserialize)]
struct RawHypotheses {
    theta0: f64,
    theta1: f64,
}

impl TryFrom<RawHypotheses> for Hypotheses {
    type Error = KwError;

    fn try_from(raw: RawHypotheses) -> Result<Self> {
        Hypotheses::new(raw.theta0, raw.theta1)
    }
}

impl Hypotheses {
    pub fn new(theta0: f64, theta1: f64) -> Result<Self> {
        check_probability("theta0", theta0)?;
        check_probability("theta1", theta1)?;
        if theta0 >= theta1 {
            return Err(KwError::Hypotheses { theta0, theta1 });
        }
        Ok(Self { theta0, theta1 })
    }

    pub fn theta0(&self) -> f64 {
        self.theta0
    }

    pub fn theta1(&self) -> f64 {
        self.theta1
    }

    /// True when `θ0 = 1 - θ1` up to rounding of the inputs.
    pub fn is_symmetric(&self) -> bool {
        (self.theta0 + self.theta1 - 1.0).abs() < 1e-12
    }

    /// Log-likelihood-ratio increment `ln f_θ1(x) / f_θ0(x)` for one observation.
    pub fn llr_increment(&self, success: bool) -> f64 {
        if success {
            (self.theta1 / self.theta0).ln()
        } else {
            ((1.0 - self.theta1) / (1.0 - self.theta0)).ln()
        }
    }
}

/// A node `(n, s)` of the lattice: `n ≥ 1` observations, `s ≤ n` successes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LatticeState {
    n: usize,
    s: usize,
}

impl LatticeState {
    pub fn new(n: usize, s: usize) -> Result<Self> {
        if n == 0 || s > n {
            return Err(KwError::State { n, s });
        }
        Ok(Self { n, s })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn s(&self) -> usize {
        self.s
    }
}

/// `ln g_θ^n(s) = s ln θ + (n - s) ln(1 - θ)`.
pub fn log_g(theta: f64, state: LatticeState) -> Result<f64> {
    check_probability("theta", theta)?;
    Ok(LogWeights::new(theta).log_g(state.n, state.s))
}

/// Binomial point mass `C(n, s) θ^s (1-θ)^(n-s)`, evaluated in log space.
pub fn scaled_binomial_g(theta: f64, state: LatticeState) -> Result<f64> {
    check_probability("theta", theta)?;
    let table = log_factorials(state.n);
    Ok(LogWeights::new(theta).scaled(&table, state.n, state.s))
}

/// `ln(f_θ1(x)/f_θ0(x))` for `x ∈ {0, 1}`.
pub fn log_likelihood_ratio_increment(hyp: &Hypotheses, x: u8) -> Result<f64> {
    match x {
        0 => Ok(hyp.llr_increment(false)),
        1 => Ok(hyp.llr_increment(true)),
        _ => Err(KwError::Config(format!(
            "observation must be 0 or 1, got {x}"
        ))),
    }
}

/// Cached `ln θ`, `ln(1-θ)` for repeated lattice evaluations.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LogWeights {
    pub ln_p: f64,
    pub ln_q: f64,
}

impl LogWeights {
    pub fn new(theta: f64) -> Self {
        Self {
            ln_p: theta.ln(),
            ln_q: (-theta).ln_1p(),
        }
    }

    #[inline]
    pub fn log_g(&self, n: usize, s: usize) -> f64 {
        s as f64 * self.ln_p + (n - s) as f64 * self.ln_q
    }

    #[inline]
    pub fn scaled(&self, table: &LogFactorials, n: usize, s: usize) -> f64 {
        (table.ln_choose(n, s) + self.log_g(n, s)).exp()
    }
}

/// Cumulative table of `ln k!` for `k = 0..=max`.
#[derive(Debug, Clone)]
pub struct LogFactorials {
    values: Vec<f64>,
}

impl LogFactorials {
    fn build(max: usize) -> Self {
        let mut values = Vec::with_capacity(max + 1);
        values.push(0.0);
        let mut acc = 0.0;
        for k in 1..=max {
            acc += (k as f64).ln();
            values.push(acc);
        }
        Self { values }
    }

    pub fn max(&self) -> usize {
        self.values.len() - 1
    }

    #[inline]
    pub fn ln_factorial(&self, k: usize) -> f64 {
        self.values[k]
    }

    #[inline]
    pub fn ln_choose(&self, n: usize, s: usize) -> f64 {
        self.values[n] - self.values[s] - self.values[n - s]
    }
}

/// Process-wide log-factorial table covering at least `0..=max`.
///
/// The shared table only grows; callers keep the returned `Arc` for the
/// duration of a recursion so lookups are lock-free.
pub fn log_factorials(max: usize) -> Arc<LogFactorials> {
    static TABLE: OnceLock<RwLock<Arc<LogFactorials>>> = OnceLock::new();
    let lock = TABLE.get_or_init(|| RwLock::new(Arc::new(LogFactorials::build(4096))));
    {
        let current = lock.read().expect("log-factorial table poisoned");
        if current.max() >= max {
            return Arc::clone(&current);
        }
    }
    let mut current = lock.write().expect("log-factorial table poisoned");
    if current.max() < max {
        let target = max.max(2 * current.max());
        *current = Arc::new(LogFactorials::build(target));
    }
    Arc::clone(&current)
}
