use kw_core::backward::Action;
use kw_core::evaluate::{asn, characterize, oc, quantile, simulate, stop_distribution};
use kw_core::model::{log_g, log_likelihood_ratio_increment, scaled_binomial_g, LatticeState};
use kw_core::{build_plan, effective_horizon, Hypotheses, LagrangeConfig, Plan};
use proptest::prelude::*;

/// `(θ0, θ1, θ*)` with `θ0 < θ* < θ1`, kept away from the edges.
fn triple() -> impl Strategy<Value = (f64, f64, f64)> {
    (0.02f64..0.9, 0.03f64..0.5, 0.1f64..0.9).prop_filter_map(
        "θ1 inside (0, 1)",
        |(t0, gap, frac)| {
            let t1 = t0 + gap;
            (t1 < 0.98).then_some((t0, t1, t0 + frac * gap))
        },
    )
}

fn config() -> impl Strategy<Value = (LagrangeConfig, usize)> {
    (triple(), 0.0f64..8.0, 0.0f64..8.0, 1usize..80).prop_map(|((t0, t1, ts), a, b, h)| {
        let hyp = Hypotheses::new(t0, t1).unwrap();
        (LagrangeConfig::new(hyp, ts, a.exp(), b.exp()).unwrap(), h)
    })
}

fn symmetric_swap_holds(plan: &Plan) -> bool {
    let reach = plan.reachable();
    (1..=plan.horizon()).all(|n| {
        (0..=n).all(|s| !reach[n - 1][s] || plan.action(n, s) == plan.action(n, n - s).swapped())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stop_distribution_is_normalized((cfg, h) in config(), theta in 0.01f64..0.99) {
        let plan = build_plan(&cfg, h).unwrap();
        let dist = stop_distribution(&plan, theta).unwrap();
        let total: f64 = dist.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert_eq!(dist.len(), effective_horizon(&plan));
        let q = quantile(&dist, 0.99).unwrap();
        prop_assert!(q >= 1 && q <= effective_horizon(&plan));
        let mean: f64 = dist.iter().enumerate().map(|(i, p)| (i + 1) as f64 * p).sum();
        prop_assert!((mean - asn(&plan, theta).unwrap()).abs() <= 1e-9 * mean);
        let o = oc(&plan, theta).unwrap();
        prop_assert!((-1e-15..=1.0 + 1e-12).contains(&o));
    }

    #[test]
    fn lagrangian_identity((cfg, h) in config()) {
        let plan = build_plan(&cfg, h).unwrap();
        let ch = characterize(&plan, &[]).unwrap();
        let want = ch.asn_at_star + cfg.lambda0 * ch.alpha + cfg.lambda1 * ch.beta;
        prop_assert!((plan.lagrangian_value() - want).abs() <= 1e-9 * want);
    }

    #[test]
    fn continuation_is_an_interval((cfg, h) in config()) {
        let plan = build_plan(&cfg, h).unwrap();
        prop_assert!(plan.has_interval_continuation());
        prop_assert!(plan.row(h).iter().all(|a| a.is_stop()));
    }

    #[test]
    fn error_probabilities_respond_monotonically(
        (cfg, h) in config(),
        bump in 0.01f64..2.0,
    ) {
        // Lagrangian minimizers: raising λ0 cannot raise α, raising λ1 cannot raise β
        let plan = build_plan(&cfg, h).unwrap();
        let base = characterize(&plan, &[]).unwrap();
        let up0 = LagrangeConfig::new(cfg.hyp, cfg.theta_star, cfg.lambda0 * bump.exp(), cfg.lambda1).unwrap();
        let up1 = LagrangeConfig::new(cfg.hyp, cfg.theta_star, cfg.lambda0, cfg.lambda1 * bump.exp()).unwrap();
        let a = characterize(&build_plan(&up0, h).unwrap(), &[]).unwrap();
        let b = characterize(&build_plan(&up1, h).unwrap(), &[]).unwrap();
        prop_assert!(a.alpha <= base.alpha + 1e-12);
        prop_assert!(b.beta <= base.beta + 1e-12);
    }

    #[test]
    fn symmetric_configs_give_symmetric_plans(
        t0 in 0.05f64..0.45,
        ln_lambda in 0.0f64..9.0,
        h in 1usize..300,
        theta in 0.01f64..0.99,
    ) {
        let hyp = Hypotheses::new(t0, 1.0 - t0).unwrap();
        let lambda = ln_lambda.exp();
        let cfg = LagrangeConfig::new(hyp, 0.5, lambda, lambda).unwrap();
        let plan = build_plan(&cfg, h).unwrap();
        prop_assert!(symmetric_swap_holds(&plan));
        // an exact tie at the centre of the last row is the only possible break
        let tie_reachable = h % 2 == 0 && plan.reachable()[h - 1][h / 2];
        if !tie_reachable {
            let sum = oc(&plan, theta).unwrap() + oc(&plan, 1.0 - theta).unwrap();
            prop_assert!((sum - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn scaled_weights_sum_to_one(n in 1usize..30, theta in prop::sample::select(vec![0.05, 0.5, 0.95])) {
        let total: f64 = (0..=n).map(|s| scaled_binomial_g(theta, LatticeState::new(n, s).unwrap()).unwrap()).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        for s in 0..=n {
            let state = LatticeState::new(n, s).unwrap();
            let choose = (0..s).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64);
            let via_log = log_g(theta, state).unwrap().exp() * choose;
            let direct = scaled_binomial_g(theta, state).unwrap();
            prop_assert!((via_log - direct).abs() <= 1e-12 * direct);
        }
    }

    #[test]
    fn llr_increments_antisymmetric_only_when_symmetric((t0, t1, _) in triple()) {
        let hyp = Hypotheses::new(t0, t1).unwrap();
        let up = log_likelihood_ratio_increment(&hyp, 1).unwrap();
        let down = log_likelihood_ratio_increment(&hyp, 0).unwrap();
        prop_assert!(up > 0.0 && down < 0.0);
        prop_assert_eq!((up + down).abs() < 1e-12, hyp.is_symmetric());
    }
}

#[test]
fn symmetric_reference_plan_is_swap_symmetric_everywhere_reachable() {
    let hyp = Hypotheses::new(0.45, 0.55).unwrap();
    let cfg = LagrangeConfig::new(hyp, 0.5, 526.61, 526.61).unwrap();
    let plan = build_plan(&cfg, kw_core::horizon_bound(&cfg).unwrap()).unwrap();
    assert_eq!(effective_horizon(&plan), 571);
    assert!(symmetric_swap_holds(&plan));
    for n in 1..plan.horizon() {
        for s in 0..=n {
            assert_eq!(
                plan.action(n, s),
                plan.action(n, n - s).swapped(),
                "({n}, {s})"
            );
        }
    }
}

#[test]
fn centre_tie_at_the_horizon_accepts() {
    // λ too small to ever continue: the centre state of an even stage is an exact tie
    let hyp = Hypotheses::new(0.3, 0.7).unwrap();
    let cfg = LagrangeConfig::new(hyp, 0.5, 0.5, 0.5).unwrap();
    let plan = build_plan(&cfg, 2).unwrap();
    assert_eq!(plan.action(2, 1), Action::AcceptH0);
}

#[test]
fn simulation_is_reproducible_and_seed_sensitive() {
    let hyp = Hypotheses::new(0.1, 0.3).unwrap();
    let cfg = LagrangeConfig::new(hyp, 0.2, 60.0, 60.0).unwrap();
    let plan = build_plan(&cfg, 120).unwrap();
    let a = simulate(&plan, 0.2, 50_000, 9).unwrap();
    assert_eq!(a, simulate(&plan, 0.2, 50_000, 9).unwrap());
    assert_ne!(a, simulate(&plan, 0.2, 50_000, 10).unwrap());
}

#[test]
fn building_is_deterministic() {
    let hyp = Hypotheses::new(0.05, 0.15).unwrap();
    let cfg = LagrangeConfig::new(hyp, 0.0768, 157.70, 193.35).unwrap();
    let h = kw_core::horizon_bound(&cfg).unwrap();
    assert_eq!(build_plan(&cfg, h).unwrap(), build_plan(&cfg, h).unwrap());
}
