mod common;

use drawdown_core::dual_solver::solve_v;

use common::{enumerate_v, toy_lattices, toy_params};

#[test]
fn policy_iteration_matches_enumeration() {
    let mut seen = [false; 3];
    let mut worst: f64 = 0.0;
    for params in toy_params() {
        for lat in toy_lattices(&params) {
            let sol = solve_v(&params, &lat).unwrap();
            let oracle = enumerate_v(&params, &lat);
            for r in oracle.regimes.iter().flatten() {
                seen[*r] = true;
            }
            for (k, (a, b)) in sol.values().iter().zip(&oracle.v).enumerate() {
                let gap = (a - b).abs();
                worst = worst.max(gap);
                assert!(
                    gap <= 1e-10,
                    "{params} n_s={} n_tau={} entry {k}: {a} vs {b}",
                    lat.n_s,
                    lat.n_tau
                );
            }
        }
    }
    assert_eq!(seen, [true; 3], "toy set must exercise every regime");
    assert!(worst <= 1e-10);
}

#[test]
fn enumeration_finds_a_unique_value() {
    // Several assignments can be feasible at a tie, but they must agree.
    for params in toy_params() {
        for lat in toy_lattices(&params) {
            let oracle = enumerate_v(&params, &lat);
            assert!(oracle.feasible.iter().all(|&c| c >= 1));
            assert!(oracle.spread <= 1e-10, "spread {:e}", oracle.spread);
        }
    }
}
