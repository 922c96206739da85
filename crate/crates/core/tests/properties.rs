use drawdown_core::boundary::extract_boundaries;
use drawdown_core::dual_solver::{residual_report, solve_v, Regime, SolverOptions};
use drawdown_core::lattice::{build_lattice, GridConfig};
use drawdown_core::model::{discount_bound, ModelParams};
use proptest::prelude::*;

fn params() -> impl Strategy<Value = ModelParams> {
    (
        0.03..0.10f64,
        0.15..0.35f64,
        0.3..0.8f64,
        0.2..0.8f64,
        0.5..2.0f64,
        0.05..0.5f64,
    )
        .prop_map(|(mu, sigma, p, alpha, horizon, extra)| {
            let delta = discount_bound(mu, sigma, p) + extra;
            ModelParams::new(mu, sigma, delta, p, alpha, horizon).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn dual_solution_invariants(params in params()) {
        let lat = build_lattice(&params, &GridConfig::new(160, 40)).unwrap();
        let sol = solve_v(&params, &lat).unwrap();
        let tol = SolverOptions::default().tolerance(&params);
        let report = residual_report(&sol, tol);
        prop_assert!(report.passed(), "max active {:e}", report.max_active());

        let v0 = params.derived().v0;
        for n in 0..sol.n_layers() {
            let layer = sol.layer(n);
            for i in 0..sol.n_s() {
                prop_assert!(layer[i] >= 0.0 && layer[i] <= v0 * (1.0 + 1e-12));
                if i + 1 < sol.n_s() {
                    prop_assert!(layer[i + 1] <= layer[i] + 1e-12);
                }
                if n > 0 {
                    prop_assert!(layer[i] <= sol.v(i, n - 1) + 1e-10);
                }
            }
            if n > 0 {
                // GRADIENT block, then EQUATION, then FUNCTION.
                let order: Vec<u8> = sol.regimes(n).iter().map(|r| match r {
                    Regime::Gradient => 0,
                    Regime::Equation => 1,
                    Regime::Function => 2,
                }).collect();
                prop_assert!(order.windows(2).all(|w| w[0] <= w[1]));
            }
        }

        let b = extract_boundaries(&sol).unwrap();
        let sa = params.derived().s_alpha;
        for n in 1..b.tau.len() {
            prop_assert!(b.s[n] <= 2.0 * lat.ds);
            if b.z[n].is_finite() {
                prop_assert!(b.z[n] > sa);
            }
        }
    }
}

#[test]
fn refinement_keeps_value_close() {
    let params = ModelParams::reference();
    let coarse = solve_v(
        &params,
        &build_lattice(&params, &GridConfig::new(300, 150)).unwrap(),
    )
    .unwrap();
    let fine_grid = GridConfig::new(300, 150).refined();
    let fine = solve_v(&params, &build_lattice(&params, &fine_grid).unwrap()).unwrap();
    // Kink snapping shifts the fine nodes, so read the fine layer by linear
    // interpolation at each coarse node.
    let fl = &fine.lattice;
    let mut worst: f64 = 0.0;
    for n in 0..coarse.n_layers() {
        let layer = fine.layer(2 * n);
        for i in 0..coarse.n_s() {
            let x = (coarse.lattice.s_nodes[i] - fl.s_min) / fl.ds;
            let j = (x.max(0.0).floor() as usize).min(fl.n_s - 2);
            let w = (x - j as f64).clamp(0.0, 1.0);
            let v = layer[j] * (1.0 - w) + layer[j + 1] * w;
            worst = worst.max((coarse.v(i, n) - v).abs());
        }
    }
    assert!(
        worst < 5.0 * (coarse.lattice.ds + coarse.lattice.dtau),
        "{worst}"
    );
}
