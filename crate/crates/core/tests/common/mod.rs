//! Path-enumeration oracle and the plan battery shared by the oracle and acceptance targets.
#![allow(dead_code)]

use kw_core::backward::Action;
use kw_core::{build_plan, Hypotheses, LagrangeConfig, Plan};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// OC, ASN and stopping distribution by walking every path of length H.
pub struct PathOracle {
    pub oc: f64,
    pub asn: f64,
    pub stop_dist: Vec<f64>,
}

pub fn enumerate_paths(plan: &Plan, theta: f64) -> PathOracle {
    let h = plan.horizon();
    let mut oc = 0.0;
    let mut asn = 0.0;
    let mut stop_dist = vec![0.0; h];
    for bits in 0u32..(1 << h) {
        let ones = bits.count_ones() as i32;
        let weight = theta.powi(ones) * (1.0 - theta).powi(h as i32 - ones);
        let mut s = 0;
        for n in 1..=h {
            s += ((bits >> (n - 1)) & 1) as usize;
            match plan.action(n, s) {
                Action::Continue => continue,
                action => {
                    if action == Action::AcceptH0 {
                        oc += weight;
                    }
                    asn += n as f64 * weight;
                    stop_dist[n - 1] += weight;
                    break;
                }
            }
        }
    }
    PathOracle { oc, asn, stop_dist }
}

pub fn random_plan(rng: &mut ChaCha8Rng, hyp: Hypotheses, horizon: usize, p_continue: f64) -> Plan {
    let cfg = LagrangeConfig::new(hyp, 0.5 * (hyp.theta0() + hyp.theta1()), 20.0, 30.0).unwrap();
    let rows = (1..=horizon)
        .map(|n| {
            (0..=n)
                .map(|_| {
                    if n < horizon && rng.random_bool(p_continue) {
                        Action::Continue
                    } else if rng.random_bool(0.5) {
                        Action::AcceptH0
                    } else {
                        Action::RejectH0
                    }
                })
                .collect()
        })
        .collect();
    Plan::from_rows(cfg, rows).unwrap()
}

/// Continue everywhere until `horizon`, then accept iff `s < cut`.
pub fn fixed_sample_plan(hyp: Hypotheses, horizon: usize, cut: usize) -> Plan {
    let cfg = LagrangeConfig::new(hyp, 0.5 * (hyp.theta0() + hyp.theta1()), 5.0, 5.0).unwrap();
    let rows = (1..=horizon)
        .map(|n| {
            (0..=n)
                .map(|s| match (n == horizon, s < cut) {
                    (false, _) => Action::Continue,
                    (true, true) => Action::AcceptH0,
                    (true, false) => Action::RejectH0,
                })
                .collect()
        })
        .collect();
    Plan::from_rows(cfg, rows).unwrap()
}

pub fn battery() -> Vec<(String, Plan)> {
    let mut out = Vec::new();
    let built = [
        (0.05, 0.15, 0.08, 157.70, 193.35, 12),
        (0.05, 0.15, 0.08, 20.0, 25.0, 10),
        (0.1, 0.2, 0.14, 40.0, 45.0, 12),
        (0.2, 0.3, 0.24, 60.0, 60.0, 11),
        (0.4, 0.5, 0.45, 80.0, 85.0, 12),
        (0.45, 0.55, 0.5, 50.0, 50.0, 12),
        (0.45, 0.55, 0.5, 50.0, 50.0, 9),
        (0.2, 0.6, 0.4, 30.0, 30.0, 12),
        (0.1, 0.7, 0.35, 8.0, 15.0, 10),
        (0.3, 0.9, 0.7, 100.0, 10.0, 12),
        (0.05, 0.5, 0.2, 3.0, 4.0, 8),
        (0.2, 0.3, 0.26, 0.0, 0.0, 6),
        (0.1, 0.9, 0.5, 1000.0, 1000.0, 12),
    ];
    for (t0, t1, ts, l0, l1, h) in built {
        let hyp = Hypotheses::new(t0, t1).unwrap();
        let cfg = LagrangeConfig::new(hyp, ts, l0, l1).unwrap();
        out.push((
            format!("built {t0}/{t1} θ*={ts} λ=({l0},{l1}) H={h}"),
            build_plan(&cfg, h).unwrap(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (i, (t0, t1, h, p)) in [
        (0.1, 0.3, 12, 0.7),
        (0.2, 0.5, 10, 0.9),
        (0.4, 0.6, 12, 0.5),
        (0.05, 0.15, 11, 0.95),
        (0.3, 0.35, 12, 0.8),
    ]
    .into_iter()
    .enumerate()
    {
        let hyp = Hypotheses::new(t0, t1).unwrap();
        out.push((
            format!("random #{i} H={h}"),
            random_plan(&mut rng, hyp, h, p),
        ));
    }
    let hyp = Hypotheses::new(0.3, 0.6).unwrap();
    out.push((
        "fixed sample H=12 cut 5".into(),
        fixed_sample_plan(hyp, 12, 5),
    ));
    out.push((
        "fixed sample H=1 cut 1".into(),
        fixed_sample_plan(hyp, 1, 1),
    ));
    out.push((
        "fixed sample H=7 cut 0".into(),
        fixed_sample_plan(hyp, 7, 0),
    ));
    out
}
