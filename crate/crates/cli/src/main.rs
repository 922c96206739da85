//! `drawdown`: solve, export and verify the drawdown consumption problem.
//!
//! Exit codes: 0 success, 1 invalid input, 2 solver failure, 3 a
//! verification check failed.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, ValueEnum};

use drawdown_core::config::RunConfig;
use drawdown_core::export::{self, Cell};
use drawdown_core::pipeline::{solve_all, solve_dual, PipelineError, Solved};
use drawdown_core::simulate::{
    simulate_challenger, simulate_policy, ChallengerRow, ConstantConsumption, FeedbackRule,
    GapEstimate, SimError,
};
use drawdown_core::verify::{comparative_checks, run_suite, Check, SuiteOptions, VerifyError};

/// Environment variable that replaces `output.dir` from the config file.
const OUT_ENV: &str = "DRAWDOWN_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Command {
    /// Dual value function and regime labels.
    Solve,
    /// Free boundaries (tau, S, Z, phi).
    Boundaries,
    /// Primal thresholds and feedback policy tables.
    Policy,
    /// Monte Carlo run of the optimal policy and two challengers.
    Simulate,
    /// Full invariant suite with per-check margins.
    Verify,
    /// Boundaries and policy for several drawdown fractions, with the
    /// comparative-statics table.
    SweepAlpha,
}

#[derive(Debug, Parser)]
#[command(name = "drawdown", version, about)]
struct Cli {
    command: Command,
    /// Flat `section.key = value` config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides DRAWDOWN_OUT and `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma separated drawdown fractions for sweep-alpha and verify.
    #[arg(long, value_delimiter = ',')]
    alpha_list: Option<Vec<f64>>,
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn invalid(e: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 1,
        error: e.into(),
    }
}

fn solver(e: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 2,
        error: e.into(),
    }
}

fn from_pipeline(e: PipelineError) -> Failure {
    match e {
        PipelineError::Lattice(_) => invalid(e),
        _ => solver(e),
    }
}

fn from_sim(e: SimError) -> Failure {
    match e {
        SimError::InvalidConfig(_) => invalid(e),
        _ => solver(e),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| invalid(anyhow!(e).context(format!("cannot write {}", path.display())))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn output_dir(cli: &Cli, cfg: &RunConfig) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| cfg.output_dir.clone())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = RunConfig::load(&cli.config).map_err(invalid)?;
    let out = output_dir(cli, &cfg);
    fs::create_dir_all(&out)
        .with_context(|| format!("cannot create output directory {}", out.display()))
        .map_err(invalid)?;
    match cli.command {
        Command::Solve => cmd_solve(&cfg, &out),
        Command::Boundaries => cmd_boundaries(&cfg, &out),
        Command::Policy => cmd_policy(&cfg, &out),
        Command::Simulate => cmd_simulate(&cfg, &out),
        Command::Verify => cmd_verify(cli, &cfg, &out),
        Command::SweepAlpha => cmd_sweep(cli, &cfg, &out),
    }
}

fn meta(cfg: &RunConfig, what: impl Display) -> String {
    format!("{what}; {}", cfg.metadata())
}

fn cmd_solve(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let (sol, _) = solve_dual(&cfg.params, &cfg.grid).map_err(from_pipeline)?;
    let m = meta(cfg, "dual value v(s, tau)");
    let path = out.join("dual_v.csv");
    export::write_dual_csv(&path, &m, &sol).map_err(io_err(&path))?;
    let path = out.join("dual_v.bin");
    export::write_dual_binary(&path, &sol).map_err(io_err(&path))?;
    let rows = (0..sol.n_layers()).map(|n| {
        let count = |r| sol.regimes(n).iter().filter(|&&x| x == r).count();
        use drawdown_core::dual_solver::Regime::*;
        vec![
            sol.lattice.tau_nodes[n].into(),
            sol.iterations[n].into(),
            count(Gradient).into(),
            count(Equation).into(),
            count(Function).into(),
        ]
    });
    let path = out.join("dual_layers.csv");
    export::write_csv(
        &path,
        &meta(cfg, "per-layer policy iterations and regime counts"),
        &[
            "tau",
            "iterations",
            "n_gradient",
            "n_equation",
            "n_function",
        ],
        rows,
    )
    .map_err(io_err(&path))?;
    println!(
        "solved {} x {} nodes into {}",
        sol.n_s(),
        sol.n_layers(),
        out.display()
    );
    Ok(())
}

fn write_boundaries(cfg: &RunConfig, solved: &Solved, dir: &Path) -> Result<(), Failure> {
    let path = dir.join("boundaries.csv");
    export::write_boundaries_csv(
        &path,
        &meta(
            cfg,
            format!("free boundaries, alpha={}", solved.params().alpha()),
        ),
        &solved.bset,
    )
    .map_err(io_err(&path))
}

fn write_policy(cfg: &RunConfig, solved: &Solved, dir: &Path) -> Result<(), Failure> {
    let alpha = solved.params().alpha();
    let path = dir.join("thresholds.csv");
    export::write_thresholds_csv(
        &path,
        &meta(cfg, format!("primal thresholds, alpha={alpha}")),
        &solved.policy,
    )
    .map_err(io_err(&path))?;
    let path = dir.join("policy.csv");
    export::write_policy_csv(
        &path,
        &meta(
            cfg,
            format!("primal value and feedback policy, alpha={alpha}"),
        ),
        &solved.policy,
    )
    .map_err(io_err(&path))
}

fn cmd_boundaries(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let solved = solve_all(&cfg.params, &cfg.grid, &cfg.primal).map_err(from_pipeline)?;
    write_boundaries(cfg, &solved, out)?;
    println!("wrote {}", out.join("boundaries.csv").display());
    Ok(())
}

fn cmd_policy(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let solved = solve_all(&cfg.params, &cfg.grid, &cfg.primal).map_err(from_pipeline)?;
    write_policy(cfg, &solved, out)?;
    let p = &solved.policy;
    println!(
        "t=0: omega*={:.6} omega_1={:.6} omega_alpha={:.6}",
        p.omega_star[0], p.omega_one[0], p.omega_alpha[0]
    );
    Ok(())
}

fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let sim = cfg
        .sim
        .clone()
        .ok_or_else(|| invalid(anyhow!("config has no sim.* keys")))?;
    let solved = solve_all(&cfg.params, &cfg.grid, &cfg.primal).map_err(from_pipeline)?;
    let pol = &solved.policy;
    let value = pol.value_v(sim.x0, sim.z0, sim.t0);
    let result = simulate_policy(pol, &sim).map_err(from_sim)?;
    let m = meta(
        cfg,
        format!(
            "monte carlo x0={} z0={} t0={} dt={} seed={} antithetic={}",
            sim.x0, sim.z0, sim.t0, sim.dt, sim.seed, sim.antithetic
        ),
    );
    let path = out.join("sim_result.csv");
    export::write_sim_result_csv(&path, &m, &result, value).map_err(io_err(&path))?;
    if let Some(paths) = &result.paths_summary {
        let path = out.join("sim_paths.csv");
        export::write_paths_csv(&path, &m, paths).map_err(io_err(&path))?;
    }

    let floor = ConstantConsumption::floor(pol);
    let full = ConstantConsumption::full(pol);
    let mut rows = vec![ChallengerRow {
        name: "optimal".into(),
        estimate: GapEstimate {
            mc_mean: result.mean_utility,
            std_error: result.std_error,
            value,
            gap: result.mean_utility - value,
        },
    }];
    for rule in [&floor as &dyn FeedbackRule, &full] {
        let r = simulate_challenger(pol, rule, &sim).map_err(from_sim)?;
        rows.push(ChallengerRow {
            name: rule.name(),
            estimate: GapEstimate {
                mc_mean: r.mean_utility,
                std_error: r.std_error,
                value,
                gap: r.mean_utility - value,
            },
        });
    }
    let path = out.join("challengers.csv");
    export::write_challengers_csv(&path, &m, &rows).map_err(io_err(&path))?;
    for r in &rows {
        println!(
            "{:<22} mean {:.6} +- {:.2e}  V {:.6}  gap {:+.3e}",
            r.name, r.estimate.mc_mean, r.estimate.std_error, value, r.estimate.gap
        );
    }
    Ok(())
}

fn check_rows(checks: &[Check]) -> Vec<Vec<Cell>> {
    checks
        .iter()
        .map(|c| {
            vec![
                (c.group as usize).into(),
                c.name.as_str().into(),
                format!("{:?}", c.relation).into(),
                c.measured.into(),
                c.bound.into(),
                c.margin().into(),
                c.passed().into(),
            ]
        })
        .collect()
}

const CHECK_HEADER: [&str; 7] = [
    "group", "check", "relation", "measured", "bound", "margin", "passed",
];

fn sorted_alphas(cli: &Cli, cfg: &RunConfig) -> Result<Vec<f64>, Failure> {
    let mut alphas = cli
        .alpha_list
        .clone()
        .unwrap_or_else(|| cfg.sweep_alphas.clone());
    for &a in &alphas {
        cfg.params.with_alpha(a).map_err(invalid)?;
    }
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    Ok(alphas)
}

fn cmd_verify(cli: &Cli, cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let mut opts = SuiteOptions::from_config(cfg);
    if cli.alpha_list.is_some() {
        let a = sorted_alphas(cli, cfg)?;
        opts.alphas = (a.len() >= 2).then(|| (a[0], a[a.len() - 1]));
    }
    let report = run_suite(cfg, &opts).map_err(|e| match e {
        VerifyError::Pipeline(p) => from_pipeline(p),
        VerifyError::Simulation(s) => from_sim(s),
        VerifyError::Model(m) => invalid(m),
    })?;
    let path = out.join("verify_report.csv");
    export::write_csv(
        &path,
        &meta(cfg, "invariant report"),
        &CHECK_HEADER,
        check_rows(&report.checks),
    )
    .map_err(io_err(&path))?;
    let path = out.join("verify_report.txt");
    fs::write(&path, format!("{report}\n")).map_err(io_err(&path))?;
    println!("{report}");
    fail_on(report.failures())
}

/// Exit code 3 naming every failed invariant.
fn fail_on<'a>(failed: impl Iterator<Item = &'a Check>) -> Result<(), Failure> {
    let names: Vec<String> = failed.map(|c| c.to_string()).collect();
    if names.is_empty() {
        return Ok(());
    }
    Err(Failure {
        code: 3,
        error: anyhow!(
            "{} invariant(s) violated:\n  {}",
            names.len(),
            names.join("\n  ")
        ),
    })
}

fn cmd_sweep(cli: &Cli, cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let alphas = sorted_alphas(cli, cfg)?;
    if alphas.is_empty() {
        return Err(invalid(anyhow!("empty alpha list")));
    }
    let mut solved = Vec::with_capacity(alphas.len());
    for &a in &alphas {
        let params = cfg.params.with_alpha(a).map_err(invalid)?;
        let s = solve_all(&params, &cfg.grid, &cfg.primal).map_err(from_pipeline)?;
        let dir = out.join(format!("alpha_{a}"));
        fs::create_dir_all(&dir)
            .with_context(|| format!("cannot create {}", dir.display()))
            .map_err(invalid)?;
        write_boundaries(cfg, &s, &dir)?;
        write_policy(cfg, &s, &dir)?;
        solved.push(s);
    }

    let mut rows = Vec::new();
    for s in &solved {
        let b = &s.bset;
        let p = &s.policy;
        let last = b.tau.len() - 1;
        for n in 0..=last {
            let j = last - n;
            rows.push(vec![
                s.params().alpha().into(),
                b.tau[n].into(),
                p.t_nodes[j].into(),
                b.s[n].into(),
                b.z[n].into(),
                p.omega_star[j].into(),
                p.omega_one[j].into(),
                p.omega_alpha[j].into(),
            ]);
        }
    }
    let path = out.join("sweep_alpha.csv");
    export::write_csv(
        &path,
        &meta(cfg, format!("comparative statics over alpha in {alphas:?}")),
        &[
            "alpha",
            "tau",
            "t",
            "S",
            "Z",
            "omega_star",
            "omega_one",
            "omega_alpha",
        ],
        rows,
    )
    .map_err(io_err(&path))?;

    let checks: Vec<Check> = solved
        .windows(2)
        .flat_map(|w| comparative_checks(&w[0], &w[1]))
        .collect();
    let path = out.join("sweep_checks.csv");
    export::write_csv(
        &path,
        &meta(cfg, "comparative-statics checks"),
        &CHECK_HEADER,
        check_rows(&checks),
    )
    .map_err(io_err(&path))?;
    for s in &solved {
        let p = &s.policy;
        println!(
            "alpha={:<6} S(T)={:+.6} omega*(0)={:.6} omega_alpha(0)={:.6}",
            s.params().alpha(),
            s.bset.s[s.bset.s.len() - 1],
            p.omega_star[0],
            p.omega_alpha[0]
        );
    }
    for c in &checks {
        println!("{c}");
    }
    fail_on(checks.iter().filter(|c| !c.passed()))
}
