//! Acceptance run on the reference configuration: one PASS/FAIL line per
//! criterion, followed by the failing checks with their margins.
//!
//! Exits with status 1 if any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use drawdown_core::dual_solver::solve_v;
use drawdown_core::lattice::GridConfig;
use drawdown_core::model::ModelParams;
use drawdown_core::pipeline::{solve_all, Solved};
use drawdown_core::primal::PrimalConfig;
use drawdown_core::simulate::SimConfig;
use drawdown_core::verify::{
    boundary_checks, comparative_checks, complementarity_checks, dual_bound_checks, hjb_checks,
    monte_carlo_checks, primal_checks, reconstruction_checks, round_trip_checks, Check, Relation,
};

use common::{enumerate_v, toy_lattices, toy_params};

const TITLES: [&str; 10] = [
    "complementarity",
    "bounds and monotonicity of v",
    "dual free boundaries",
    "reconstruction equivalence",
    "oracle equivalence",
    "primal structure",
    "comparative statics",
    "duality round trip",
    "primal HJB residual",
    "Monte Carlo consistency",
];

fn oracle_checks() -> Vec<Check> {
    let mut worst: f64 = 0.0;
    let mut instances = 0usize;
    for params in toy_params() {
        for lat in toy_lattices(&params) {
            let sol = match solve_v(&params, &lat) {
                Ok(s) => s,
                Err(_) => {
                    worst = f64::INFINITY;
                    continue;
                }
            };
            let oracle = enumerate_v(&params, &lat);
            for (a, b) in sol.values().iter().zip(&oracle.v) {
                worst = worst.max((a - b).abs());
            }
            instances += 1;
        }
    }
    vec![Check::new(
        5,
        format!("max |policy iteration - enumeration| over {instances} toy instances"),
        worst,
        Relation::AtMost,
        1e-10,
    )]
}

fn solve(params: &ModelParams, grid: &GridConfig) -> Solved {
    solve_all(params, grid, &PrimalConfig::default()).expect("reference solve")
}

fn main() -> ExitCode {
    let start = Instant::now();
    let params = ModelParams::reference();
    let grid = GridConfig::new(1200, 600);
    let base = solve(&params, &grid);
    let fine = solve(&params, &grid.refined());
    let lo = solve(&params.with_alpha(0.3).unwrap(), &grid);
    let hi = solve(&params.with_alpha(0.6).unwrap(), &grid);

    let mut checks = complementarity_checks(&base);
    checks.extend(dual_bound_checks(&base));
    checks.extend(boundary_checks(&base));
    checks.extend(reconstruction_checks(&base, Some(&fine)));
    checks.extend(oracle_checks());
    checks.extend(primal_checks(&base, Some(&fine)));
    checks.extend(comparative_checks(&lo, &hi));
    checks.extend(round_trip_checks(&base, 50, 7));
    checks.extend(hjb_checks(&base, Some(&fine)));
    let sim = SimConfig {
        n_paths: 100_000,
        dt: 1e-3,
        antithetic: true,
        ..SimConfig::default()
    };
    match monte_carlo_checks(&base.policy, &sim) {
        Ok(c) => checks.extend(c),
        Err(e) => checks.push(Check::new(
            10,
            format!("simulation error: {e}"),
            f64::NAN,
            Relation::AtMost,
            0.0,
        )),
    }

    let mut failed = 0;
    for (g, title) in (1u8..=10).zip(TITLES) {
        let group: Vec<&Check> = checks.iter().filter(|c| c.group == g).collect();
        let bad = group.iter().filter(|c| !c.passed()).count();
        let ok = !group.is_empty() && bad == 0;
        if !ok {
            failed += 1;
        }
        println!(
            "criterion {g:>2} {}: {title} ({} of {} checks)",
            if ok { "PASS" } else { "FAIL" },
            group.len() - bad,
            group.len()
        );
    }
    println!();
    for c in &checks {
        println!("{c}");
    }
    println!(
        "\n{} of 10 criteria pass ({:.1} s)",
        10 - failed,
        start.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
