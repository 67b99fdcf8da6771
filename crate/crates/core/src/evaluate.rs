//! Exact characteristics of truncated plans.
//!
//! OC and ASN come from the binomially scaled backward recursions
//!
//! ```text
//! A^n(s) = G^n(s)·[accept]                                   (stopped states)
//! A^n(s) = A^{n+1}(s)·(n+1-s)/(n+1) + A^{n+1}(s+1)·(s+1)/(n+1)  (continue)
//! B^n(s) = 0                                                  (stopped states)
//! B^n(s) = G^n(s) + B^{n+1}(s)·(n+1-s)/(n+1) + B^{n+1}(s+1)·(s+1)/(n+1)
//! ```
//!
//! with `OC = A^1(0) + A^1(1)` and `ASN = 1 + B^1(0) + B^1(1)`. They hold for
//! any truncated plan, not only Lagrange-optimal ones. The stopping-time
//! distribution uses a forward pass over reach probabilities instead.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backward::{Action, Plan};
use crate::error::{KwError, Result};
use crate::model::{check_probability, log_factorials, LogWeights};
use crate::optimize;

/// Default absolute tolerance of the scalar optimizer.
pub const DEFAULT_TOL: f64 = 1e-6;

/// Values of the two backward recursions at one lattice state.
#[derive(Debug, Clone, Copy, Default)]
struct Pair {
    oc: f64,
    asn: f64,
}

fn backward_pass(plan: &Plan, theta: f64) -> Pair {
    let weights = LogWeights::new(theta);
    let table = log_factorials(plan.horizon() + 1);
    let stop_value = |n: usize, s: usize| -> Pair {
        match plan.action(n, s) {
            Action::AcceptH0 => Pair {
                oc: weights.scaled(&table, n, s),
                asn: 0.0,
            },
            _ => Pair::default(),
        }
    };

    let mut next: Vec<Pair> = Vec::new();
    let mut next_lo = 0usize;
    let mut cur: Vec<Pair> = Vec::new();
    for n in (1..plan.horizon()).rev() {
        cur.clear();
        let span = plan.continue_span(n);
        if let Some((lo, hi)) = span {
            let child = |s: usize| -> Pair {
                if plan.action(n + 1, s) == Action::Continue {
                    next[s - next_lo]
                } else {
                    stop_value(n + 1, s)
                }
            };
            let denom = (n + 1) as f64;
            for s in lo..=hi {
                if plan.action(n, s) != Action::Continue {
                    cur.push(stop_value(n, s));
                    continue;
                }
                let up = child(s + 1);
                let down = child(s);
                let wu = (s + 1) as f64 / denom;
                let wd = (n + 1 - s) as f64 / denom;
                cur.push(Pair {
                    oc: down.oc * wd + up.oc * wu,
                    asn: weights.scaled(&table, n, s) + down.asn * wd + up.asn * wu,
                });
            }
        }
        std::mem::swap(&mut next, &mut cur);
        next_lo = span.map_or(0, |s| s.0);
    }

    let root = |s: usize| -> Pair {
        if plan.horizon() > 1 && plan.action(1, s) == Action::Continue {
            next[s - next_lo]
        } else {
            stop_value(1, s)
        }
    };
    let (r0, r1) = (root(0), root(1));
    Pair {
        oc: r0.oc + r1.oc,
        asn: 1.0 + r0.asn + r1.asn,
    }
}

/// Probability of accepting H0 when the success probability is `theta`.
pub fn oc(plan: &Plan, theta: f64) -> Result<f64> {
    check_probability("theta", theta)?;
    Ok(backward_pass(plan, theta).oc)
}

/// Expected number of observations when the success probability is `theta`.
pub fn asn(plan: &Plan, theta: f64) -> Result<f64> {
    check_probability("theta", theta)?;
    Ok(backward_pass(plan, theta).asn)
}

/// `P_θ(τ = n)` for `n = 1..=H_eff`.
pub fn stop_distribution(plan: &Plan, theta: f64) -> Result<Vec<f64>> {
    check_probability("theta", theta)?;
    let mut probs = Vec::new();
    // reach masses on [lo, lo + reach.len())
    let mut reach = vec![1.0 - theta, theta];
    let mut lo = 0usize;
    let mut n = 1usize;
    loop {
        let mut stopped = 0.0;
        let mut next: Vec<f64> = Vec::new();
        let mut next_lo = usize::MAX;
        for (i, &mass) in reach.iter().enumerate() {
            let s = lo + i;
            if plan.action(n, s) == Action::Continue {
                if next_lo == usize::MAX {
                    next_lo = s;
                }
                let k = s - next_lo;
                if next.len() < k + 2 {
                    next.resize(k + 2, 0.0);
                }
                next[k] += mass * (1.0 - theta);
                next[k + 1] += mass * theta;
            } else {
                stopped += mass;
            }
        }
        probs.push(stopped);
        if next.is_empty() {
            break;
        }
        reach = next;
        lo = next_lo;
        n += 1;
    }
    Ok(probs)
}

/// Smallest `n` with `P(τ ≤ n) ≥ level`.
pub fn quantile(stop_dist: &[f64], level: f64) -> Result<usize> {
    check_probability("level", level)?;
    let sum: f64 = stop_dist.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(KwError::Unnormalized { sum });
    }
    let mut acc = 0.0;
    for (i, p) in stop_dist.iter().enumerate() {
        acc += p;
        if acc >= level {
            return Ok(i + 1);
        }
    }
    Ok(stop_dist.len())
}

/// Maximum of the ASN over `(θ0, θ1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsnSup {
    pub theta_max: f64,
    pub n_max: f64,
    /// The ASN at θ0 or θ1 exceeds the interior maximum.
    pub boundary_exceeds: bool,
}

pub fn asn_sup(plan: &Plan) -> AsnSup {
    asn_sup_with_tol(plan, DEFAULT_TOL)
}

pub fn asn_sup_with_tol(plan: &Plan, tol: f64) -> AsnSup {
    let hyp = plan.hypotheses();
    let (t0, t1) = (hyp.theta0(), hyp.theta1());
    let best = optimize::maximize(|t| backward_pass(plan, t).asn, t0, t1, tol);
    let edge = backward_pass(plan, t0).asn.max(backward_pass(plan, t1).asn);
    AsnSup {
        theta_max: best.x,
        n_max: best.value,
        boundary_exceeds: edge > best.value,
    }
}

/// `sup_θ N(θ) − N(θ*)` with the supremum taken over `(θ0, θ1)`.
pub fn delta(plan: &Plan) -> f64 {
    delta_with_tol(plan, DEFAULT_TOL)
}

pub fn delta_with_tol(plan: &Plan, tol: f64) -> f64 {
    let sup = asn_sup_with_tol(plan, tol);
    sup.n_max - backward_pass(plan, plan.config().theta_star).asn
}

/// ASN at θ*, OC at θ0 and θ1.
pub(crate) struct CoreValues {
    pub asn: f64,
    pub oc_theta0: f64,
    pub oc_theta1: f64,
}

pub(crate) fn characteristics_at(plan: &Plan, theta_star: f64) -> CoreValues {
    let hyp = plan.hypotheses();
    CoreValues {
        asn: backward_pass(plan, theta_star).asn,
        oc_theta0: backward_pass(plan, hyp.theta0()).oc,
        oc_theta1: backward_pass(plan, hyp.theta1()).oc,
    }
}

/// Summary of a plan's exact operating properties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Characteristics {
    /// `(θ, OC(θ))` for each requested θ.
    pub oc: Vec<(f64, f64)>,
    /// `(θ, N(θ))` for each requested θ.
    pub asn: Vec<(f64, f64)>,
    pub alpha: f64,
    pub beta: f64,
    pub asn_at_star: f64,
    /// `P_θ*(τ = n)`, `n = 1..=H_eff`.
    pub stop_dist: Vec<f64>,
    pub q99: usize,
}

pub fn characterize(plan: &Plan, thetas: &[f64]) -> Result<Characteristics> {
    let mut oc_rows = Vec::with_capacity(thetas.len());
    let mut asn_rows = Vec::with_capacity(thetas.len());
    for &t in thetas {
        check_probability("theta", t)?;
        let p = backward_pass(plan, t);
        oc_rows.push((t, p.oc));
        asn_rows.push((t, p.asn));
    }
    let star = plan.config().theta_star;
    let core = characteristics_at(plan, star);
    let stop_dist = stop_distribution(plan, star)?;
    let q99 = quantile(&stop_dist, 0.99)?;
    Ok(Characteristics {
        oc: oc_rows,
        asn: asn_rows,
        alpha: 1.0 - core.oc_theta0,
        beta: core.oc_theta1,
        asn_at_star: core.asn,
        stop_dist,
        q99,
    })
}

/// Empirical OC and ASN from simulated Bernoulli streams.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Simulation {
    pub replications: u64,
    pub oc_hat: f64,
    pub oc_se: f64,
    pub asn_hat: f64,
    pub asn_se: f64,
}

/// Number of independent RNG streams; fixed so results do not depend on the thread count.
pub(crate) const SIM_STREAMS: u64 = 64;

/// Split `replications` over [`SIM_STREAMS`] ChaCha8 streams derived from `seed`
/// and reduce `(accepts, Σn, Σn²)`.
pub(crate) fn simulate_streams<F>(replications: u64, seed: u64, run_one: F) -> Simulation
where
    F: Fn(&mut ChaCha8Rng) -> (bool, u64) + Sync,
{
    let totals = (0..SIM_STREAMS)
        .into_par_iter()
        .map(|stream| {
            let count = replications / SIM_STREAMS + u64::from(stream < replications % SIM_STREAMS);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            let mut acc = (0u64, 0u128, 0u128);
            for _ in 0..count {
                let (accepted, n) = run_one(&mut rng);
                acc.0 += u64::from(accepted);
                acc.1 += u128::from(n);
                acc.2 += u128::from(n) * u128::from(n);
            }
            acc
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((0u64, 0u128, 0u128), |a, b| {
            (a.0 + b.0, a.1 + b.1, a.2 + b.2)
        });
    let r = replications as f64;
    let oc_hat = totals.0 as f64 / r;
    let asn_hat = totals.1 as f64 / r;
    let second = totals.2 as f64 / r;
    let var = (second - asn_hat * asn_hat).max(0.0);
    Simulation {
        replications,
        oc_hat,
        oc_se: (oc_hat * (1.0 - oc_hat) / r).sqrt(),
        asn_hat,
        asn_se: (var / r).sqrt(),
    }
}

/// Run the plan on `replications` simulated streams of Bernoulli(`theta`) draws.
pub fn simulate(plan: &Plan, theta: f64, replications: u64, seed: u64) -> Result<Simulation> {
    check_probability("theta", theta)?;
    if replications == 0 {
        return Err(KwError::Config("replications must be at least 1".into()));
    }
    Ok(simulate_streams(replications, seed, |rng| {
        let mut s = 0usize;
        let mut n = 0usize;
        loop {
            n += 1;
            if rng.random::<f64>() < theta {
                s += 1;
            }
            match plan.action(n, s) {
                Action::Continue => {}
                a => return (a == Action::AcceptH0, n as u64),
            }
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backward::{build_plan, LagrangeConfig};
    use crate::model::Hypotheses;
    use Action::*;

    fn cfg() -> LagrangeConfig {
        let hyp = Hypotheses::new(0.2, 0.3).unwrap();
        LagrangeConfig::new(hyp, 0.25, 20.0, 20.0).unwrap()
    }

    fn accept_at_one() -> Plan {
        Plan::from_rows(cfg(), vec![vec![AcceptH0, AcceptH0]]).unwrap()
    }

    #[test]
    fn stage_one_plan() {
        let plan = accept_at_one();
        for t in [0.01, 0.5, 0.99] {
            assert_eq!(oc(&plan, t).unwrap(), 1.0);
            assert_eq!(asn(&plan, t).unwrap(), 1.0);
            assert_eq!(stop_distribution(&plan, t).unwrap(), vec![1.0]);
        }
        assert_eq!(delta(&plan), 0.0);
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(quantile(&[1.0], 0.99).unwrap(), 1);
        assert_eq!(quantile(&[0.5, 0.3, 0.2], 0.8).unwrap(), 2);
        assert_eq!(quantile(&[0.5, 0.3, 0.2], 0.81).unwrap(), 3);
        assert!(matches!(
            quantile(&[0.5, 0.3], 0.5),
            Err(KwError::Unnormalized { .. })
        ));
        assert!(quantile(&[1.0], 1.0).is_err());
    }

    #[test]
    fn domain_errors() {
        let plan = accept_at_one();
        assert!(oc(&plan, 0.0).is_err());
        assert!(asn(&plan, 1.0).is_err());
        assert!(stop_distribution(&plan, -0.1).is_err());
        assert!(simulate(&plan, 0.5, 0, 1).is_err());
    }

    #[test]
    fn two_stage_by_hand() {
        // continue only at (1, 1); at stage 2 accept when s ≤ 1
        let plan = Plan::from_rows(
            cfg(),
            vec![vec![AcceptH0, Continue], vec![AcceptH0, AcceptH0, RejectH0]],
        )
        .unwrap();
        let t = 0.3;
        assert!((oc(&plan, t).unwrap() - (1.0 - t * t)).abs() < 1e-15);
        assert!((asn(&plan, t).unwrap() - (1.0 + t)).abs() < 1e-15);
        let d = stop_distribution(&plan, t).unwrap();
        assert!((d[0] - 0.7).abs() < 1e-15 && (d[1] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn asn_identity_and_normalization() {
        let c = cfg();
        let plan = build_plan(&c, crate::backward::horizon_bound(&c).unwrap()).unwrap();
        for t in [0.1, 0.2, 0.25, 0.3, 0.6] {
            let d = stop_distribution(&plan, t).unwrap();
            let total: f64 = d.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            let mean: f64 = d.iter().enumerate().map(|(i, p)| (i + 1) as f64 * p).sum();
            let a = asn(&plan, t).unwrap();
            assert!((mean / a - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let c = cfg();
        let plan = build_plan(&c, 60).unwrap();
        let a = simulate(&plan, 0.25, 10_000, 7).unwrap();
        let b = simulate(&plan, 0.25, 10_000, 7).unwrap();
        assert_eq!(a, b);
        let exact = asn(&plan, 0.25).unwrap();
        assert!((a.asn_hat - exact).abs() < 5.0 * a.asn_se);
    }

    #[test]
    fn simulation_stage_one() {
        let s = simulate(&accept_at_one(), 0.4, 1000, 3).unwrap();
        assert_eq!(s.asn_hat, 1.0);
        assert_eq!(s.oc_hat, 1.0);
    }
}
