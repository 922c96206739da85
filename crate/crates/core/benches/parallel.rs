//! Sequential vs parallel execution on the three data-parallel workloads:
//! Monte Carlo paths, an alpha sweep and per-t-layer primal construction.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use drawdown_core::exec::{map_indexed, Execution};
use drawdown_core::lattice::GridConfig;
use drawdown_core::model::ModelParams;
use drawdown_core::pipeline::{solve_all, solve_dual};
use drawdown_core::primal::{dual_to_primal, PrimalConfig};
use drawdown_core::simulate::{simulate_policy, SimConfig};

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn grid() -> GridConfig {
    GridConfig::new(400, 200)
}

fn mc_paths(c: &mut Criterion) {
    let params = ModelParams::reference();
    let pol = solve_all(&params, &grid(), &PrimalConfig::default())
        .unwrap()
        .policy;
    let mut g = c.benchmark_group("mc_paths");
    g.sample_size(10);
    for (name, exec) in MODES {
        let cfg = SimConfig {
            n_paths: 4_000,
            dt: 1.0 / 200.0,
            x0: pol.omega_one[0],
            exec,
            ..SimConfig::default()
        };
        g.bench_with_input(BenchmarkId::from_parameter(name), &cfg, |b, cfg| {
            b.iter(|| black_box(simulate_policy(&pol, cfg).unwrap().mean_utility))
        });
    }
    g.finish();
}

fn alpha_sweep(c: &mut Criterion) {
    let params = ModelParams::reference();
    let alphas = [0.2, 0.3, 0.4, 0.5, 0.6, 0.7];
    let mut g = c.benchmark_group("alpha_sweep");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                map_indexed(exec, alphas.len(), |k| {
                    let p = params.with_alpha(alphas[k]).unwrap();
                    let primal = PrimalConfig {
                        exec: Execution::Sequential,
                        ..PrimalConfig::default()
                    };
                    solve_all(&p, &grid(), &primal).unwrap().policy.omega_star[0]
                })
            })
        });
    }
    g.finish();
}

fn primal_layers(c: &mut Criterion) {
    let params = ModelParams::reference();
    let (sol, bset) = solve_dual(&params, &grid()).unwrap();
    let mut g = c.benchmark_group("primal_layers");
    g.sample_size(10);
    for (name, exec) in MODES {
        let cfg = PrimalConfig {
            exec,
            ..PrimalConfig::default()
        };
        g.bench_with_input(BenchmarkId::from_parameter(name), &cfg, |b, cfg| {
            b.iter(|| black_box(dual_to_primal(&sol, &bset, None, cfg).unwrap().u.len()))
        });
    }
    g.finish();
}

criterion_group!(benches, mc_paths, alpha_sweep, primal_layers);
criterion_main!(benches);
