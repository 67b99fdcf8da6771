use kw_core::evaluate::delta_with_tol;
use kw_core::{build_plan, horizon_bound, Hypotheses, LagrangeConfig};
use std::time::Instant;
fn main() {
    let h = Hypotheses::new(0.3, 0.5).unwrap();
    for t in [0.4, 0.31, 0.301, 0.3003] {
        let cfg = LagrangeConfig::new(h, t, 2f64.exp(), 2f64.exp()).unwrap();
        let b = horizon_bound(&cfg).unwrap();
        let s = Instant::now();
        let plan = build_plan(&cfg, b.min(1 << 15)).unwrap();
        let t1 = s.elapsed();
        let d = delta_with_tol(&plan, 1e-6);
        println!(
            "θ*={t} bound={b} build={t1:?} delta={:?} Δ={d}",
            s.elapsed() - t1
        );
    }
}
