//! Exact SPRT characteristics and fixed-sample-size baselines.
//!
//! The SPRT continues while the log-likelihood ratio
//! `s·ln(θ1/θ0) + (n−s)·ln((1−θ1)/(1−θ0))` stays strictly inside
//! `(log_b, log_a)`. Its characteristics are computed by pushing reach
//! probabilities forward through the lattice until the mass that has not
//! yet been absorbed drops below [`RESIDUAL_TOL`].

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{KwError, Result};
use crate::evaluate::{simulate_streams, Simulation};
use crate::model::{check_probability, log_factorials, Hypotheses, LogWeights};

pub const RESIDUAL_TOL: f64 = 1e-12;
pub const DEFAULT_STAGE_CAP: usize = 1_000_000;

/// SPRT continuation interval `(log_b, log_a)` on the log-likelihood-ratio scale.
///
/// `log_b` is the lower endpoint (accept H0 on reaching it) and `log_a` the
/// upper one (reject H0). Tabulations often label these the other way
/// round as "log A" (negative) and "log B" (positive).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SprtDesign {
    pub hyp: Hypotheses,
    pub log_b: f64,
    pub log_a: f64,
}

impl SprtDesign {
    pub fn new(hyp: Hypotheses, log_b: f64, log_a: f64) -> Result<Self> {
        if !(log_b < 0.0 && log_a > 0.0 && log_b.is_finite() && log_a.is_finite()) {
            return Err(KwError::Config(format!(
                "SPRT endpoints must satisfy log_b < 0 < log_a, got ({log_b}, {log_a})"
            )));
        }
        Ok(Self { hyp, log_b, log_a })
    }

    /// Wald's approximate endpoints for the nominal error probabilities.
    pub fn wald(hyp: Hypotheses, alpha: f64, beta: f64) -> Result<Self> {
        check_probability("alpha", alpha)?;
        check_probability("beta", beta)?;
        Self::new(
            hyp,
            (beta / (1.0 - alpha)).ln(),
            ((1.0 - beta) / alpha).ln(),
        )
    }
}

/// Result of one forward absorption pass under a single θ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SprtRun {
    pub theta: f64,
    /// Probability of absorption at the lower endpoint (accepting H0).
    pub oc: f64,
    /// Expected sample number, truncated at the last stage computed.
    pub asn: f64,
    /// `P_θ(τ = n)` for `n = 1..=stages`.
    pub stop_dist: Vec<f64>,
    /// Mass still unabsorbed after the last stage.
    pub residual_mass: f64,
    /// Estimated ASN truncation error, assuming the residual keeps decaying
    /// geometrically at its recent rate.
    pub asn_error_bound: f64,
}

impl SprtRun {
    pub fn stages(&self) -> usize {
        self.stop_dist.len()
    }

    /// Residual after each stage is non-increasing; exposed for diagnostics.
    pub fn quantile(&self, level: f64) -> usize {
        let mut acc = 0.0;
        for (i, p) in self.stop_dist.iter().enumerate() {
            acc += p;
            if acc >= level {
                return i + 1;
            }
        }
        self.stop_dist.len()
    }
}

/// Forward lattice pass for `design` under success probability `theta`.
pub fn sprt_run(design: &SprtDesign, theta: f64, stage_cap: usize) -> Result<SprtRun> {
    check_probability("theta", theta)?;
    let up = design.hyp.llr_increment(true);
    let down = design.hyp.llr_increment(false);
    let llr = |n: usize, s: usize| s as f64 * up + (n - s) as f64 * down;
    let inside = |n: usize, s: usize| {
        let z = llr(n, s);
        design.log_b < z && z < design.log_a
    };

    let q = 1.0 - theta;
    // reach masses before the stage-n decision, on [lo, lo + mass.len())
    let mut mass = vec![q, theta];
    let mut lo = 0usize;
    let mut n = 1usize;
    let mut oc = 0.0;
    let mut asn = 0.0;
    let mut stop_dist = Vec::new();
    let mut residual;
    let mut residuals: Vec<f64> = Vec::new();
    loop {
        let mut absorbed = 0.0;
        let mut next = vec![0.0; mass.len() + 1];
        let mut any = false;
        for (i, &m) in mass.iter().enumerate() {
            let s = lo + i;
            if inside(n, s) {
                next[i] += m * q;
                next[i + 1] += m * theta;
                any = true;
            } else {
                absorbed += m;
                if llr(n, s) <= design.log_b {
                    oc += m;
                }
            }
        }
        stop_dist.push(absorbed);
        asn += n as f64 * absorbed;
        residual = next.iter().sum::<f64>();
        if !any || residual < RESIDUAL_TOL {
            break;
        }
        if n >= stage_cap {
            return Err(KwError::NonAbsorption {
                residual,
                stages: n,
            });
        }
        debug_assert!(residuals
            .last()
            .is_none_or(|&r| residual <= r * (1.0 + 1e-12)));
        residuals.push(residual);
        // trim leading/trailing zeros to keep the window tight
        let first = next.iter().position(|&m| m > 0.0).unwrap_or(0);
        let last = next.iter().rposition(|&m| m > 0.0).unwrap_or(0);
        mass = next[first..=last].to_vec();
        lo += first;
        n += 1;
    }
    residuals.push(residual);
    // unabsorbed paths contribute at least n + 1 each, plus a geometric tail
    let asn_error_bound = residual * (n as f64 + 1.0 + decay_tail(&residuals));
    Ok(SprtRun {
        theta,
        oc,
        asn,
        stop_dist,
        residual_mass: residual,
        asn_error_bound,
    })
}

/// Expected extra stages under geometric decay of the residual mass.
///
/// The per-stage rate is averaged over a window to smooth out the lattice
/// periodicity of the absorption pattern.
fn decay_tail(residuals: &[f64]) -> f64 {
    let k = residuals.len().saturating_sub(1).min(64);
    let (last, earlier) = (
        residuals[residuals.len() - 1],
        residuals[residuals.len() - 1 - k],
    );
    if k == 0 || last <= 0.0 || earlier <= 0.0 {
        return 0.0;
    }
    let rho = (last / earlier).powf(1.0 / k as f64).min(1.0 - 1e-12);
    1.0 / (1.0 - rho)
}

/// SPRT operating characteristics: errors plus ASN and 0.99-quantile at θ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SprtCharacteristics {
    pub alpha: f64,
    pub beta: f64,
    pub theta: f64,
    pub asn: f64,
    pub q99: usize,
    /// Largest residual mass across the three passes.
    pub residual_mass: f64,
    pub asn_error_bound: f64,
}

pub fn sprt_characteristics(design: &SprtDesign, theta: f64) -> Result<SprtCharacteristics> {
    sprt_characteristics_capped(design, theta, DEFAULT_STAGE_CAP)
}

pub fn sprt_characteristics_capped(
    design: &SprtDesign,
    theta: f64,
    stage_cap: usize,
) -> Result<SprtCharacteristics> {
    let at0 = sprt_run(design, design.hyp.theta0(), stage_cap)?;
    let at1 = sprt_run(design, design.hyp.theta1(), stage_cap)?;
    let at = sprt_run(design, theta, stage_cap)?;
    Ok(SprtCharacteristics {
        alpha: 1.0 - at0.oc,
        beta: at1.oc,
        theta,
        asn: at.asn,
        q99: at.quantile(0.99),
        residual_mass: at0
            .residual_mass
            .max(at1.residual_mass)
            .max(at.residual_mass),
        asn_error_bound: at.asn_error_bound,
    })
}

fn sprt_errors(design: &SprtDesign) -> Result<(f64, f64)> {
    let at0 = sprt_run(design, design.hyp.theta0(), DEFAULT_STAGE_CAP)?;
    let at1 = sprt_run(design, design.hyp.theta1(), DEFAULT_STAGE_CAP)?;
    Ok((1.0 - at0.oc, at1.oc))
}

/// A matched SPRT with its achieved error probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SprtMatch {
    pub design: SprtDesign,
    pub alpha: f64,
    pub beta: f64,
    /// Both errors within `rel_tol` of nominal; otherwise the nearest pair found.
    pub matched: bool,
}

/// Search SPRT endpoints whose exact errors match `(alpha, beta)` within `rel_tol`.
///
/// Alternates one-dimensional searches: `log_a` against `ln(α/α_nominal)`,
/// then `log_b` against `ln(β/β_nominal)`, each by damped secant steps inside
/// a bracket with a bisection fallback. The error probabilities are step
/// functions of the endpoints, so a compass search on the maximal relative
/// error follows and the closest design found is returned. It carries
/// `matched = false` when even that misses `rel_tol` (typically when
/// `θ0 = 1 − θ1`).
pub fn sprt_match(hyp: &Hypotheses, alpha: f64, beta: f64, rel_tol: f64) -> Result<SprtMatch> {
    check_probability("alpha", alpha)?;
    check_probability("beta", beta)?;
    let start = SprtDesign::wald(*hyp, alpha, beta)?;
    let tol = (1.0 + rel_tol).ln();
    let mut search = SprtSearch {
        hyp: *hyp,
        alpha,
        beta,
        best: None,
        evaluations: 0,
    };

    let (mut log_b, mut log_a) = (start.log_b, start.log_a);
    let (mut a, mut b) = search.eval(log_b, log_a)?;
    for _ in 0..40 {
        if search.rel(a, b) <= rel_tol || search.evaluations > 4000 {
            break;
        }
        // α decreases in log_a
        log_a = root_1d(log_a, (a / alpha).ln(), tol, 1e-9, |x| {
            Ok((search.eval(log_b, x)?.0 / alpha).ln())
        })?;
        (a, b) = search.eval(log_b, log_a)?;
        if search.rel(a, b) <= rel_tol {
            break;
        }
        // β increases in log_b
        log_b = root_1d(log_b, -(b / beta).ln(), tol, 1e-9, |x| {
            Ok(-(search.eval(x, log_a)?.1 / beta).ln())
        })?;
        (a, b) = search.eval(log_b, log_a)?;
    }
    search.refine()?;
    let mut m = search.best.expect("evaluated at least once");
    m.matched = search.rel(m.alpha, m.beta) <= rel_tol;
    Ok(m)
}

struct SprtSearch {
    hyp: Hypotheses,
    alpha: f64,
    beta: f64,
    best: Option<SprtMatch>,
    evaluations: usize,
}

impl SprtSearch {
    /// Compass search on the maximal relative error around the best design.
    fn refine(&mut self) -> Result<()> {
        const DIRECTIONS: [(f64, f64); 8] = [
            (1.0, 0.0),
            (-1.0, 0.0),
            (0.0, 1.0),
            (0.0, -1.0),
            (1.0, 1.0),
            (-1.0, -1.0),
            (1.0, -1.0),
            (-1.0, 1.0),
        ];
        let mut radius = 0.02;
        while radius >= 1e-5 && self.evaluations < 4000 {
            let centre = self.best.expect("refine after an evaluation");
            let score = self.rel(centre.alpha, centre.beta);
            let mut moved = false;
            for (db, da) in DIRECTIONS {
                let (b, a) = (
                    centre.design.log_b + radius * db,
                    centre.design.log_a + radius * da,
                );
                if b >= 0.0 || a <= 0.0 {
                    continue;
                }
                let (alpha, beta) = self.eval(b, a)?;
                if self.rel(alpha, beta) < score {
                    moved = true;
                    break;
                }
            }
            if !moved {
                radius *= 0.5;
            }
        }
        Ok(())
    }

    fn rel(&self, a: f64, b: f64) -> f64 {
        (a / self.alpha - 1.0)
            .abs()
            .max((b / self.beta - 1.0).abs())
    }

    fn eval(&mut self, log_b: f64, log_a: f64) -> Result<(f64, f64)> {
        let design = SprtDesign::new(self.hyp, log_b, log_a)?;
        let (a, b) = sprt_errors(&design)?;
        self.evaluations += 1;
        let improves = match self.best {
            None => true,
            Some(m) => self.rel(a, b) < self.rel(m.alpha, m.beta),
        };
        if improves {
            self.best = Some(SprtMatch {
                design,
                alpha: a,
                beta: b,
                matched: false,
            });
        }
        Ok((a, b))
    }
}

/// Root of a non-increasing step-like function `f` near `x0` (`f(x0) = f0`).
///
/// Returns the point with the smallest `|f|` found once the bracket is
/// narrower than `x_tol` or `|f| ≤ f_tol`.
fn root_1d<F>(x0: f64, f0: f64, f_tol: f64, x_tol: f64, mut f: F) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    if f0.abs() <= f_tol {
        return Ok(x0);
    }
    let mut best = (x0, f0);
    let record = |x: f64, fx: f64, best: &mut (f64, f64)| {
        if fx.abs() < best.1.abs() {
            *best = (x, fx);
        }
    };
    // bracket with unit slope guess
    let (mut xa, mut fa) = (x0, f0);
    let mut step = f0.clamp(-2.0, 2.0);
    if step.abs() < 1e-3 {
        step = 1e-3 * f0.signum();
    }
    let (mut xb, mut fb);
    loop {
        xb = xa + step;
        if xb <= 1e-6 && x0 > 0.0 {
            xb = 0.5 * xa;
        }
        if xb >= -1e-6 && x0 < 0.0 {
            xb = 0.5 * xa;
        }
        fb = f(xb)?;
        record(xb, fb, &mut best);
        if fb.abs() <= f_tol {
            return Ok(xb);
        }
        if fb.signum() != fa.signum() {
            break;
        }
        if (xb - xa).abs() < x_tol {
            return Ok(best.0);
        }
        xa = xb;
        fa = fb;
        step *= 2.0;
    }
    let (mut lo, mut flo, mut hi, mut fhi) = if xa < xb {
        (xa, fa, xb, fb)
    } else {
        (xb, fb, xa, fa)
    };
    let mut bisect = false;
    while hi - lo > x_tol {
        let secant = lo - flo * (hi - lo) / (fhi - flo);
        let w = hi - lo;
        let x = if bisect || !(secant > lo + 0.05 * w && secant < hi - 0.05 * w) {
            0.5 * (lo + hi)
        } else {
            secant
        };
        let fx = f(x)?;
        record(x, fx, &mut best);
        if fx.abs() <= f_tol {
            return Ok(x);
        }
        if fx.signum() == flo.signum() {
            lo = x;
            flo = fx;
        } else {
            hi = x;
            fhi = fx;
        }
        bisect = hi - lo > 0.5 * w;
    }
    Ok(best.0)
}

/// Monte Carlo run of an SPRT; `oc_hat` is the acceptance frequency.
pub fn simulate_sprt(
    design: &SprtDesign,
    theta: f64,
    replications: u64,
    seed: u64,
) -> Result<Simulation> {
    check_probability("theta", theta)?;
    if replications == 0 {
        return Err(KwError::Config("replications must be at least 1".into()));
    }
    let up = design.hyp.llr_increment(true);
    let down = design.hyp.llr_increment(false);
    Ok(simulate_streams(replications, seed, |rng| {
        use rand::Rng;
        let mut s = 0usize;
        let mut n = 0usize;
        loop {
            n += 1;
            if rng.random::<f64>() < theta {
                s += 1;
            }
            let z = s as f64 * up + (n - s) as f64 * down;
            if z <= design.log_b {
                return (true, n as u64);
            }
            if z >= design.log_a {
                return (false, n as u64);
            }
        }
    }))
}

/// Smallest sample size of a non-randomized test "reject H0 iff `S_n ≥ k`"
/// meeting both error bounds. Returns `(n, k)`.
pub fn fss_exact(hyp: &Hypotheses, alpha: f64, beta: f64) -> Result<(usize, usize)> {
    check_probability("alpha", alpha)?;
    check_probability("beta", beta)?;
    let w0 = LogWeights::new(hyp.theta0());
    let w1 = LogWeights::new(hyp.theta1());
    let mut n = 1usize;
    loop {
        let table = log_factorials(n);
        // smallest k with P0(S ≥ k) ≤ α
        let mut tail = 0.0;
        let mut k = n + 1;
        for s in (0..=n).rev() {
            let p = w0.scaled(&table, n, s);
            if tail + p > alpha {
                break;
            }
            tail += p;
            k = s;
        }
        let miss: f64 = (0..k).map(|s| w1.scaled(&table, n, s)).sum();
        if miss <= beta {
            return Ok((n, k));
        }
        n += 1;
    }
}

/// Normal-approximation sample size, not rounded.
pub fn fss_approx(hyp: &Hypotheses, alpha: f64, beta: f64) -> Result<f64> {
    check_probability("alpha", alpha)?;
    check_probability("beta", beta)?;
    let z = |p: f64| Normal::standard().inverse_cdf(1.0 - p);
    let (t0, t1) = (hyp.theta0(), hyp.theta1());
    let num = z(alpha) * (t0 * (1.0 - t0)).sqrt() + z(beta) * (t1 * (1.0 - t1)).sqrt();
    Ok((num / (t1 - t0)).powi(2))
}

/// Efficiency of the sequential tests relative to the fixed-sample test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRatios {
    pub r: f64,
    pub qr: f64,
    pub r_w: Option<f64>,
    pub qr_w: Option<f64>,
}

/// `FSS / N` and `FSS / Q99` for the optimal plan and, when given, the SPRT.
pub fn efficiency_ratios(
    fss: usize,
    asn_star: f64,
    q99_star: usize,
    sprt: Option<(f64, usize)>,
) -> EfficiencyRatios {
    let f = fss as f64;
    EfficiencyRatios {
        r: f / asn_star,
        qr: f / q99_star as f64,
        r_w: sprt.map(|(n, _)| f / n),
        qr_w: sprt.map(|(_, q)| f / q as f64),
    }
}
