mod common;

use mvdiv::equilibrium::intercept_weights;
use mvdiv::{
    compute_roots, simulate_path, solve_barrier, ClosedForm, ModelParams, SimConfig, Strategy, StrategyKind,
};
use proptest::prelude::*;

use common::reference;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn roots_satisfy_vieta(a in -1.0..1.0f64, b in 0.1..2.0f64, rho in 0.005..0.5f64, d in 0.001..1.0f64) {
        let p = ModelParams::new(a, b, rho, d, 0.0).unwrap();
        let r = compute_roots(&p);
        let b2 = b * b;
        let rel = |x: f64, y: f64| ((x - y) / y).abs();
        prop_assert!(rel(r.r1 * r.r2, -2.0 * rho / b2) <= 1e-12);
        prop_assert!(rel(r.r3 * r.r4, -4.0 * rho / b2) <= 1e-12);
        prop_assert!(rel(r.r5 * r.r6, -2.0 * rho / b2) <= 1e-12);
        prop_assert!(rel(r.r7 * r.r8, -4.0 * rho / b2) <= 1e-12);
    }

    #[test]
    fn variance_is_nonnegative_for_any_barrier(
        d_bar in 0.035..0.2f64, gamma in 0.0..0.6f64, level in 0.0..2.0f64, x in 0.0..8.0f64,
    ) {
        let p = reference(d_bar, gamma);
        let form = ClosedForm::barrier(&p, level).unwrap();
        prop_assert!(form.variance(x) >= -1e-12);
        prop_assert!(form.g(x) <= p.perpetuity() + 1e-12);
        prop_assert!(form.h(x) <= p.perpetuity() * p.perpetuity() + 1e-12);
    }

    #[test]
    fn variance_is_nonnegative_at_the_equilibrium(d_bar in 0.035..0.2f64, gamma in 0.0..0.4f64) {
        let p = reference(d_bar, gamma);
        if let Some(level) = solve_barrier(&p).unwrap() {
            let form = ClosedForm::barrier(&p, level).unwrap();
            for i in 0..200 {
                prop_assert!(form.variance(i as f64 * 0.05) >= -1e-12);
            }
        }
    }

    #[test]
    fn partition_agrees_with_the_rule(
        cuts in prop::collection::vec(0.01..5.0f64, 1..6),
        picks in prop::collection::vec(0usize..3, 6),
        x in 0.0..6.0f64,
    ) {
        let p = reference(0.05, 0.2);
        let mut knots = cuts.clone();
        knots.sort_by(f64::total_cmp);
        knots.dedup();
        let levels = [0.0, 0.025, 0.05];
        let rates: Vec<f64> = knots.iter().zip(&picks).map(|(_, &k)| levels[k]).collect();
        let s = Strategy::tabulated(&p, knots, rates, Some(0.05)).unwrap();
        prop_assert_eq!(s.kind(), StrategyKind::Tabulated);
        let part = s.partition().unwrap();
        prop_assert_eq!(part.rate(x), s.dividend_rate(x).unwrap());
    }

    #[test]
    fn intercept_weights_reproduce_lines(slope in -3.0..3.0f64, icept in -3.0..3.0f64) {
        let xs = [0.4, 0.2, 0.1, 0.05];
        let w = intercept_weights(&xs);
        let fit: f64 = w.iter().zip(&xs).map(|(w, x)| w * (icept + slope * x)).sum();
        prop_assert!((fit - icept).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn square_identity_residual_is_order_dt(seed in any::<u64>(), path in 0u64..1_000_000, x0 in 0.01..2.0f64) {
        let p = reference(0.05, 0.2);
        let s = Strategy::barrier(&p, 0.2).unwrap();
        let cfg = SimConfig::new(1e-2, 1, seed);
        let o = simulate_path(&p, &s, x0, &cfg, path).unwrap();
        let bound = 10.0 * cfg.dt * p.perpetuity() * p.perpetuity();
        prop_assert!(o.identity_residual.abs() <= bound);
        prop_assert!(o.y >= 0.0 && o.y <= p.perpetuity());
    }
}
