use drawdown_core::exec::Execution;
use drawdown_core::lattice::GridConfig;
use drawdown_core::model::ModelParams;
use drawdown_core::pipeline::solve_all;
use drawdown_core::primal::{PrimalConfig, PrimalPolicy};
use drawdown_core::simulate::{
    estimate_gap, run_challengers, simulate_policy, ConstantConsumption, FeedbackRule, SimConfig,
};

fn policy() -> PrimalPolicy {
    let params = ModelParams::reference();
    solve_all(
        &params,
        &GridConfig::new(300, 150),
        &PrimalConfig::default(),
    )
    .unwrap()
    .policy
}

fn cfg(pol: &PrimalPolicy, n_paths: usize) -> SimConfig {
    SimConfig {
        n_paths,
        dt: 1.0 / 150.0,
        x0: pol.omega_one[0],
        ..SimConfig::default()
    }
}

#[test]
fn std_error_scales_with_inverse_root_of_paths() {
    let pol = policy();
    let small = simulate_policy(&pol, &cfg(&pol, 4_000)).unwrap();
    let large = simulate_policy(&pol, &cfg(&pol, 16_000)).unwrap();
    let ratio = small.std_error / large.std_error;
    assert!((1.7..=2.3).contains(&ratio), "ratio {ratio}");
}

#[test]
fn runs_are_reproducible() {
    let pol = policy();
    let c = cfg(&pol, 1_000);
    let a = simulate_policy(&pol, &c).unwrap();
    let b = simulate_policy(&pol, &c).unwrap();
    assert_eq!(a, b);
    let seq = simulate_policy(
        &pol,
        &SimConfig {
            exec: Execution::Sequential,
            ..c.clone()
        },
    )
    .unwrap();
    assert_eq!(a, seq);
}

#[test]
fn optimal_rule_tracks_value_and_beats_constant_rules() {
    let pol = policy();
    let c = cfg(&pol, 20_000);
    let gap = estimate_gap(&pol, &c).unwrap();
    let band = 3.0 * gap.std_error + 0.02 * gap.value.abs();
    assert!(gap.gap.abs() <= band, "gap {} band {band}", gap.gap);

    let floor = ConstantConsumption::floor(&pol);
    let full = ConstantConsumption::full(&pol);
    let rows = run_challengers(&pol, &c, &[&floor as &dyn FeedbackRule, &full]).unwrap();
    assert_eq!(rows.len(), 3);
    let best = &rows[0].estimate;
    for r in &rows[1..] {
        let pooled = (best.std_error.powi(2) + r.estimate.std_error.powi(2)).sqrt();
        assert!(
            r.estimate.mc_mean <= best.mc_mean + 3.0 * pooled,
            "{}",
            r.name
        );
    }
}

#[test]
fn recorded_paths_match_summary() {
    let pol = policy();
    let c = SimConfig {
        record_paths: true,
        ..cfg(&pol, 400)
    };
    let r = simulate_policy(&pol, &c).unwrap();
    let paths = r.paths_summary.as_ref().unwrap();
    assert_eq!(paths.len(), 400);
    let mean = paths.iter().map(|p| p.payoff).sum::<f64>() / paths.len() as f64;
    assert!((mean - r.mean_utility).abs() < 1e-12 * mean.abs().max(1.0));
    let bankrupt = paths.iter().filter(|p| p.bankrupt).count() as f64 / 400.0;
    assert!((bankrupt - r.bankruptcy_fraction).abs() < 1e-12);
}
