//! Outer optimization: the least-favourable `θ*` and the multipliers `(λ0, λ1)`.
//!
//! For fixed multipliers, `θ*` is chosen to minimize the gap
//! `Δ = sup_θ N(θ) − N(θ*)` of the Lagrange-optimal plan; a zero gap makes
//! the plan minimax in expected sample size among tests with its error
//! probabilities. The multipliers are then tuned until the achieved error
//! probabilities match the nominal ones.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backward::{build_plan, effective_horizon, horizon_bound, LagrangeConfig, Plan};
use crate::baselines::fss_approx;
use crate::error::{KwError, Result};
use crate::evaluate::{self, asn, delta_with_tol, oc, quantile, stop_distribution};
use crate::model::{check_probability, Hypotheses};
use crate::optimize;

/// Bounds of the initial multiplier guess, on the log scale.
pub const LOG_LAMBDA_RANGE: (f64, f64) = (6.0, 13.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Horizon taken from the analytic bound for each `(θ*, λ0, λ1)`.
    Option1,
    /// Horizon doubled until the Lagrangian value stabilizes.
    Option2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveTarget {
    pub hyp: Hypotheses,
    pub alpha_nominal: f64,
    pub beta_nominal: f64,
    pub rel_tol: f64,
    pub delta_tol: f64,
    pub max_iterations: usize,
    /// Tolerance of both scalar searches (θ* and the ASN maximum).
    pub optimizer_tol: f64,
}

impl SolveTarget {
    pub fn new(hyp: Hypotheses, alpha_nominal: f64, beta_nominal: f64) -> Result<Self> {
        check_probability("alpha", alpha_nominal)?;
        check_probability("beta", beta_nominal)?;
        Ok(Self {
            hyp,
            alpha_nominal,
            beta_nominal,
            rel_tol: 1e-3,
            delta_tol: 1e-3,
            max_iterations: 200,
            optimizer_tol: evaluate::DEFAULT_TOL,
        })
    }

    pub fn with_rel_tol(mut self, rel_tol: f64) -> Result<Self> {
        if !(rel_tol > 0.0 && rel_tol.is_finite()) {
            return Err(KwError::Config(format!(
                "rel_tol = {rel_tol} must be positive"
            )));
        }
        self.rel_tol = rel_tol;
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    /// Errors matched and `|Δ| ≤ delta_tol`.
    Solved,
    /// Errors matched but the gap exceeds `delta_tol`: optimal for the modified problem only.
    ModifiedOnly,
    /// No multipliers reached `rel_tol`; the closest pair found is reported.
    Nearest,
}

/// Result of the `θ*` search at fixed multipliers.
#[derive(Debug, Clone)]
pub struct ThetaStarFit {
    pub theta_star: f64,
    pub plan: Plan,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub theta_star: f64,
    pub lambda0: f64,
    pub lambda1: f64,
    pub plan: Plan,
    pub alpha_achieved: f64,
    pub beta_achieved: f64,
    pub delta: f64,
    pub asn_at_star: f64,
    pub effective_horizon: usize,
    pub q99: usize,
    pub iterations: usize,
    pub status: SolveStatus,
    pub method: Method,
}

/// Largest horizon either option will build.
pub const MAX_HORIZON: usize = 1 << 15;

fn bound_at(hyp: Hypotheses, theta_star: f64, l0: f64, l1: f64) -> Result<usize> {
    horizon_bound(&LagrangeConfig::new(hyp, theta_star, l0, l1)?)
}

fn build_option1(hyp: Hypotheses, theta_star: f64, l0: f64, l1: f64) -> Result<Plan> {
    let cfg = LagrangeConfig::new(hyp, theta_star, l0, l1)?;
    let bound = horizon_bound(&cfg)?;
    if bound > MAX_HORIZON {
        return Err(KwError::HorizonLimit {
            required: bound,
            limit: MAX_HORIZON,
        });
    }
    build_plan(&cfg, bound)
}

/// Sub-interval of `(θ0, θ1)` on which the horizon bound stays within
/// [`MAX_HORIZON`]. The bound diverges at both ends of the interval.
fn option1_interval(hyp: Hypotheses, l0: f64, l1: f64) -> Result<(f64, f64)> {
    let (t0, t1) = (hyp.theta0(), hyp.theta1());
    let mid = 0.5 * (t0 + t1);
    let required = bound_at(hyp, mid, l0, l1)?;
    if required > MAX_HORIZON {
        return Err(KwError::HorizonLimit {
            required,
            limit: MAX_HORIZON,
        });
    }
    let fits = |t: f64| bound_at(hyp, t, l0, l1).is_ok_and(|h| h <= MAX_HORIZON);
    // bisect towards each end until the gap is below the representable spacing
    let edge = |mut inside: f64, mut outside: f64| {
        if fits(outside) {
            return outside;
        }
        for _ in 0..200 {
            let m = 0.5 * (inside + outside);
            if m == inside || m == outside {
                break;
            }
            if fits(m) {
                inside = m;
            } else {
                outside = m;
            }
        }
        inside
    };
    Ok((edge(mid, t0), edge(mid, t1)))
}

fn check_multipliers(l0: f64, l1: f64) -> Result<()> {
    if !(l0 > 1.0 && l1 > 1.0 && l0.is_finite() && l1.is_finite()) {
        return Err(KwError::Config(format!(
            "multipliers must be finite and exceed 1, got ({l0}, {l1})"
        )));
    }
    Ok(())
}

fn search_theta_star<F>(interval: (f64, f64), tol: f64, build: F) -> Result<ThetaStarFit>
where
    F: Fn(f64) -> Result<Plan>,
{
    let (t0, t1) = interval;
    let mut failure = None;
    // Δ is never negative, so reaching zero ends the search
    let best = optimize::minimize_to_floor(
        |t| match build(t) {
            Ok(plan) => delta_with_tol(&plan, tol),
            Err(e) => {
                failure.get_or_insert(e);
                f64::INFINITY
            }
        },
        t0,
        t1,
        tol,
        0.0,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let plan = build(best.x)?;
    Ok(ThetaStarFit {
        theta_star: best.x,
        delta: delta_with_tol(&plan, tol),
        plan,
    })
}

/// Minimize `Δ` over `θ*` with each plan truncated at the analytic horizon bound.
/// Candidates whose bound exceeds [`MAX_HORIZON`] are left out of the search.
pub fn optimize_theta_star(hyp: &Hypotheses, lambda0: f64, lambda1: f64) -> Result<ThetaStarFit> {
    optimize_theta_star_with_tol(hyp, lambda0, lambda1, evaluate::DEFAULT_TOL)
}

pub fn optimize_theta_star_with_tol(
    hyp: &Hypotheses,
    lambda0: f64,
    lambda1: f64,
    tol: f64,
) -> Result<ThetaStarFit> {
    check_multipliers(lambda0, lambda1)?;
    let hyp = *hyp;
    let interval = option1_interval(hyp, lambda0, lambda1)?;
    search_theta_star(interval, tol, |t| build_option1(hyp, t, lambda0, lambda1))
}

/// [`ThetaStarFit`] at a fixed horizon, with the Lagrangian value of the plan.
#[derive(Debug, Clone)]
pub struct TruncatedFit {
    pub fit: ThetaStarFit,
    pub lagrangian_value: f64,
}

/// Same search as [`optimize_theta_star`] with every plan truncated at `horizon`.
pub fn optimize_theta_star_truncated(
    hyp: &Hypotheses,
    lambda0: f64,
    lambda1: f64,
    horizon: usize,
) -> Result<TruncatedFit> {
    optimize_theta_star_truncated_with_tol(hyp, lambda0, lambda1, horizon, evaluate::DEFAULT_TOL)
}

pub fn optimize_theta_star_truncated_with_tol(
    hyp: &Hypotheses,
    lambda0: f64,
    lambda1: f64,
    horizon: usize,
    tol: f64,
) -> Result<TruncatedFit> {
    if horizon == 0 {
        return Err(KwError::Config("horizon must be at least 1".into()));
    }
    for (name, l) in [("lambda0", lambda0), ("lambda1", lambda1)] {
        if !(l >= 0.0 && l.is_finite()) {
            return Err(KwError::Config(format!(
                "{name} = {l} must be finite and >= 0"
            )));
        }
    }
    let hyp = *hyp;
    let fit = search_theta_star((hyp.theta0(), hyp.theta1()), tol, |t| {
        build_plan(&LagrangeConfig::new(hyp, t, lambda0, lambda1)?, horizon)
    })?;
    let lagrangian_value = fit.plan.lagrangian_value();
    Ok(TruncatedFit {
        fit,
        lagrangian_value,
    })
}

/// Option 2 inner loop: double the horizon from 16 until successive
/// Lagrangian values agree to `1e-9` relative.
pub fn optimize_theta_star_growing(
    hyp: &Hypotheses,
    lambda0: f64,
    lambda1: f64,
    tol: f64,
) -> Result<TruncatedFit> {
    let mut horizon = 16;
    let mut prev = optimize_theta_star_truncated_with_tol(hyp, lambda0, lambda1, horizon, tol)?;
    loop {
        horizon *= 2;
        let cur = optimize_theta_star_truncated_with_tol(hyp, lambda0, lambda1, horizon, tol)?;
        let rel = (cur.lagrangian_value - prev.lagrangian_value).abs() / cur.lagrangian_value;
        if rel <= 1e-9 {
            return Ok(cur);
        }
        if horizon >= MAX_HORIZON {
            return Err(KwError::NonConvergence {
                iterations: horizon.trailing_zeros() as usize,
                detail: format!("Lagrangian still moving ({rel:e}) at horizon {horizon}"),
                best: None,
            });
        }
        prev = cur;
    }
}

/// Everything the multiplier search needs to know about one `(λ0, λ1)`.
#[derive(Debug, Clone)]
struct Evaluation {
    ln_l0: f64,
    ln_l1: f64,
    fit: ThetaStarFit,
    alpha: f64,
    beta: f64,
}

impl Evaluation {
    /// `(ln(α/α_nominal), ln(β/β_nominal))`; each decreases in its own multiplier.
    fn residuals(&self, target: &SolveTarget) -> (f64, f64) {
        (
            (self.alpha / target.alpha_nominal).ln(),
            (self.beta / target.beta_nominal).ln(),
        )
    }

    fn rel_error(&self, target: &SolveTarget) -> f64 {
        let ea = (self.alpha / target.alpha_nominal - 1.0).abs();
        let eb = (self.beta / target.beta_nominal - 1.0).abs();
        ea.max(eb)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Axis {
    Lambda0,
    Lambda1,
}

impl Axis {
    fn coord(self, e: &Evaluation) -> f64 {
        match self {
            Axis::Lambda0 => e.ln_l0,
            Axis::Lambda1 => e.ln_l1,
        }
    }

    fn residual(self, e: &Evaluation, target: &SolveTarget) -> f64 {
        match self {
            Axis::Lambda0 => e.residuals(target).0,
            Axis::Lambda1 => e.residuals(target).1,
        }
    }
}

/// Stop signal for the search loops.
struct Exhausted;

struct Matcher<'a> {
    target: &'a SolveTarget,
    method: Method,
    /// Symmetric hypotheses with equal nominal errors: `λ1` follows `λ0`.
    tied: bool,
    evaluations: usize,
    best: Option<Evaluation>,
}

impl Matcher<'_> {
    fn evaluate(
        &mut self,
        ln_l0: f64,
        ln_l1: f64,
    ) -> Result<std::result::Result<Evaluation, Exhausted>> {
        if self.evaluations >= self.target.max_iterations {
            return Ok(Err(Exhausted));
        }
        let ln_l1 = if self.tied { ln_l0 } else { ln_l1 };
        let (l0, l1) = (ln_l0.exp(), ln_l1.exp());
        let hyp = &self.target.hyp;
        let tol = self.target.optimizer_tol;
        let fit = match self.method {
            Method::Option1 => optimize_theta_star_with_tol(hyp, l0, l1, tol)?,
            Method::Option2 => optimize_theta_star_growing(hyp, l0, l1, tol)?.fit,
        };
        let alpha = 1.0 - oc(&fit.plan, hyp.theta0())?;
        let beta = oc(&fit.plan, hyp.theta1())?;
        let eval = Evaluation {
            ln_l0,
            ln_l1,
            fit,
            alpha,
            beta,
        };
        self.evaluations += 1;
        let better = match &self.best {
            None => true,
            Some(b) => eval.rel_error(self.target) < b.rel_error(self.target),
        };
        if better {
            self.best = Some(eval.clone());
        }
        Ok(Ok(eval))
    }

    fn matched(&self) -> bool {
        self.best
            .as_ref()
            .is_some_and(|b| b.rel_error(self.target) <= self.target.rel_tol)
    }

    /// Root of one residual along one axis, the other multiplier held fixed.
    ///
    /// Brackets the sign change with slope-guided steps, then narrows it with
    /// damped secant steps, bisecting whenever a step fails to halve the bracket.
    fn root_search(
        &mut self,
        start: Evaluation,
        axis: Axis,
    ) -> Result<std::result::Result<Evaluation, Exhausted>> {
        let target = self.target;
        let tol = (1.0 + target.rel_tol).ln();
        let res = |e: &Evaluation| axis.residual(e, target);
        let probe = |m: &mut Self, x: f64| match axis {
            Axis::Lambda0 => m.evaluate(x, start.ln_l1),
            Axis::Lambda1 => m.evaluate(start.ln_l0, x),
        };
        macro_rules! try_eval {
            ($e:expr) => {
                match $e? {
                    Ok(v) => v,
                    Err(Exhausted) => return Ok(Err(Exhausted)),
                }
            };
        }

        let mut a = start.clone();
        if res(&a).abs() <= tol {
            return Ok(Ok(a));
        }
        // ln α falls roughly one-for-one with ln λ0
        let mut step = res(&a).clamp(-1.0, 1.0);
        let mut b = try_eval!(probe(self, axis.coord(&a) + step));
        while res(&a).signum() == res(&b).signum() {
            if res(&b).abs() <= tol {
                return Ok(Ok(b));
            }
            let slope = (res(&b) - res(&a)) / (axis.coord(&b) - axis.coord(&a));
            step = if slope > 0.0 {
                res(&b) / slope * 1.5
            } else {
                step * 2.0
            };
            step = step.clamp(-2.0, 2.0);
            a = b;
            b = try_eval!(probe(self, axis.coord(&a) + step));
        }
        let (mut lo, mut hi) = if axis.coord(&a) < axis.coord(&b) {
            (a, b)
        } else {
            (b, a)
        };
        let mut bisect = false;
        while axis.coord(&hi) - axis.coord(&lo) > 1e-7 {
            let (x_lo, x_hi) = (axis.coord(&lo), axis.coord(&hi));
            let (r_lo, r_hi) = (res(&lo), res(&hi));
            let width = x_hi - x_lo;
            let secant = x_lo - r_lo * width / (r_hi - r_lo);
            let x = if bisect || !(secant > x_lo + 0.05 * width && secant < x_hi - 0.05 * width) {
                0.5 * (x_lo + x_hi)
            } else {
                secant
            };
            let e = try_eval!(probe(self, x));
            if res(&e).abs() <= tol {
                return Ok(Ok(e));
            }
            if res(&e).signum() == r_lo.signum() {
                lo = e;
            } else {
                hi = e;
            }
            bisect = axis.coord(&hi) - axis.coord(&lo) > 0.5 * width;
        }
        Ok(Ok(if res(&lo).abs() < res(&hi).abs() {
            lo
        } else {
            hi
        }))
    }

    /// Compass search on the maximal relative error around the best point.
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
        while radius >= 2e-5 {
            let centre = self.best.clone().expect("refine after an evaluation");
            let score = centre.rel_error(self.target);
            let mut moved = false;
            let tied = self.tied;
            for &(d0, d1) in DIRECTIONS.iter().filter(|(d0, d1)| !tied || d0 == d1) {
                match self.evaluate(centre.ln_l0 + radius * d0, centre.ln_l1 + radius * d1)? {
                    Err(Exhausted) => return Ok(()),
                    Ok(e) if e.rel_error(self.target) < score => {
                        moved = true;
                        break;
                    }
                    Ok(_) => {}
                }
            }
            if !moved {
                radius *= 0.5;
            }
        }
        Ok(())
    }
}

/// Solve the Kiefer-Weiss problem for the nominal error probabilities.
///
/// The multipliers live on the log scale. A first phase alternates
/// one-dimensional root searches, `ln λ0` against `ln(α/α_nominal)` and
/// `ln λ1` against `ln(β/β_nominal)`. Because plans are discrete, the
/// achievable error pairs form a fine but discrete set; a second phase runs
/// a compass search on `max(|α/α_nom − 1|, |β/β_nom − 1|)` and keeps the
/// closest pair found.
pub fn solve_kw(target: &SolveTarget, method: Method) -> Result<SolveReport> {
    let tied = target.hyp.is_symmetric() && target.alpha_nominal == target.beta_nominal;
    let mut matcher = Matcher {
        target,
        method,
        tied,
        evaluations: 0,
        best: None,
    };
    let axes: &[Axis] = if tied {
        &[Axis::Lambda0]
    } else {
        &[Axis::Lambda0, Axis::Lambda1]
    };
    let clip = |x: f64| x.clamp(LOG_LAMBDA_RANGE.0, LOG_LAMBDA_RANGE.1);
    let start = (
        clip(-2.0 * target.alpha_nominal.ln()),
        clip(-2.0 * target.beta_nominal.ln()),
    );

    'coarse: {
        let Ok(mut current) = matcher.evaluate(start.0, start.1)? else {
            break 'coarse;
        };
        let mut previous = f64::INFINITY;
        for _ in 0..8 {
            let score = current.rel_error(target);
            if score >= previous {
                break;
            }
            previous = score;
            for &axis in axes {
                match matcher.root_search(current.clone(), axis)? {
                    Ok(e) => current = e,
                    Err(Exhausted) => break 'coarse,
                }
            }
        }
    }
    matcher.refine()?;

    let evaluations = matcher.evaluations;
    let matched = matcher.matched();
    let best = matcher.best.take().expect("at least one evaluation");
    let status = if !matched {
        SolveStatus::Nearest
    } else if best.fit.delta.abs() <= target.delta_tol {
        SolveStatus::Solved
    } else {
        SolveStatus::ModifiedOnly
    };
    let report = report_from(best, evaluations, status, method)?;
    if !matched && evaluations >= target.max_iterations {
        return Err(KwError::NonConvergence {
            iterations: evaluations,
            detail: format!(
                "best iterate lambda0 = {}, lambda1 = {}, alpha = {}, beta = {}",
                report.lambda0, report.lambda1, report.alpha_achieved, report.beta_achieved
            ),
            best: Some(Box::new(report)),
        });
    }
    Ok(report)
}

fn report_from(
    eval: Evaluation,
    iterations: usize,
    status: SolveStatus,
    method: Method,
) -> Result<SolveReport> {
    let plan = eval.fit.plan;
    let star = eval.fit.theta_star;
    let dist = stop_distribution(&plan, star)?;
    Ok(SolveReport {
        theta_star: star,
        lambda0: eval.ln_l0.exp(),
        lambda1: eval.ln_l1.exp(),
        alpha_achieved: eval.alpha,
        beta_achieved: eval.beta,
        delta: eval.fit.delta,
        asn_at_star: asn(&plan, star)?,
        effective_horizon: effective_horizon(&plan),
        q99: quantile(&dist, 0.99)?,
        iterations,
        status,
        method,
        plan,
    })
}

/// One point of the multiplier grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridRecord {
    pub ln_lambda0: f64,
    pub ln_lambda1: f64,
    pub theta_star: f64,
    pub alpha: f64,
    pub beta: f64,
    pub n_star: f64,
    pub n_theta0: f64,
    pub n_theta1: f64,
    pub delta: f64,
    pub fss_approx: f64,
    pub r: f64,
    pub r0: f64,
    pub r1: f64,
}

/// Equidistant `points × points` sweep of `(ln λ0, ln λ1)` over `range`.
///
/// Records come back ordered lexicographically in `(ln λ0, ln λ1)`.
pub fn grid_sweep(
    hyp: &Hypotheses,
    range: (f64, f64),
    points_per_axis: usize,
) -> Result<Vec<GridRecord>> {
    if points_per_axis < 2 {
        return Err(KwError::Config(
            "grid needs at least 2 points per axis".into(),
        ));
    }
    let (lo, hi) = range;
    if !(lo.is_finite() && hi.is_finite() && lo < hi && lo > 0.0) {
        return Err(KwError::Config(format!(
            "invalid log-lambda range [{lo}, {hi}]"
        )));
    }
    let axis: Vec<f64> = (0..points_per_axis)
        .map(|i| {
            if i + 1 == points_per_axis {
                hi
            } else {
                lo + (hi - lo) * i as f64 / (points_per_axis - 1) as f64
            }
        })
        .collect();
    let cells: Vec<(f64, f64)> = axis
        .iter()
        .flat_map(|&a| axis.iter().map(move |&b| (a, b)))
        .collect();
    cells
        .par_iter()
        .map(|&(a, b)| grid_point(hyp, a, b))
        .collect()
}

fn grid_point(hyp: &Hypotheses, ln_l0: f64, ln_l1: f64) -> Result<GridRecord> {
    let fit = optimize_theta_star(hyp, ln_l0.exp(), ln_l1.exp())?;
    let plan = &fit.plan;
    let alpha = 1.0 - oc(plan, hyp.theta0())?;
    let beta = oc(plan, hyp.theta1())?;
    let n_star = asn(plan, fit.theta_star)?;
    let n_theta0 = asn(plan, hyp.theta0())?;
    let n_theta1 = asn(plan, hyp.theta1())?;
    // degenerate corners (a plan that always rejects, say) have no fixed-sample analogue
    let fss = fss_approx(hyp, alpha, beta).unwrap_or(f64::NAN);
    Ok(GridRecord {
        ln_lambda0: ln_l0,
        ln_lambda1: ln_l1,
        theta_star: fit.theta_star,
        alpha,
        beta,
        n_star,
        n_theta0,
        n_theta1,
        delta: fit.delta,
        fss_approx: fss,
        r: fss / n_star,
        r0: fss / n_theta0,
        r1: fss / n_theta1,
    })
}
