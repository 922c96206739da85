use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
model.mu = 0.06
model.sigma = 0.2
model.delta = 0.6
model.p = 0.5
model.alpha = 0.5
model.T = 1
grid.n_s = 200
grid.n_tau = 60
primal.n_omega = 120
";

const SIM: &str = "\
sim.n_paths = 400
sim.dt = 0.01
sim.seed = 11
sim.x0 = 1.0
sim.z0 = 1.0
";

fn drawdown(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_drawdown"));
    cmd.args(args).env_remove("DRAWDOWN_OUT");
    if let Some(dir) = env_out {
        cmd.env("DRAWDOWN_OUT", dir);
    }
    cmd.output().unwrap()
}

fn write_cfg(dir: &Path, text: &str) -> String {
    let path = dir.join("run.cfg");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_config_is_a_validation_error() {
    let o = drawdown(&["solve", "--config", "/no/such/run.cfg"], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("not found"));
    assert!(stderr(&o).contains("/no/such/run.cfg"));
}

#[test]
fn bad_input_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), &SMALL.replace("grid.n_s", "grid.nodes"));
    let o = drawdown(&["solve", "--config", &cfg], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("grid.nodes"));

    let cfg = write_cfg(
        dir.path(),
        &SMALL.replace("model.delta = 0.6", "model.delta = 0.5"),
    );
    let o = drawdown(&["solve", "--config", &cfg], None);
    assert_eq!(o.status.code(), Some(1));

    let cfg = write_cfg(dir.path(), SMALL);
    let out = dir.path().join("o");
    let o = drawdown(
        &[
            "sweep-alpha",
            "--config",
            &cfg,
            "--out",
            out.to_str().unwrap(),
            "--alpha-list",
            "0.3,1.5",
        ],
        None,
    );
    assert_eq!(o.status.code(), Some(1));

    let o = drawdown(&["explode", "--config", &cfg], None);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn solve_output_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = drawdown(
            &["solve", "--config", &cfg, "--out", out.to_str().unwrap()],
            None,
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for name in ["dual_v.csv", "dual_v.bin", "dual_layers.csv"] {
        let x = fs::read(a.join(name)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, fs::read(b.join(name)).unwrap(), "{name}");
    }
    let text = fs::read_to_string(a.join("dual_v.csv")).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# "));
    assert_eq!(lines.next().unwrap(), "tau,s,v,regime");
}

#[test]
fn env_sets_output_dir_and_flag_wins() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), SMALL);
    let env_dir = dir.path().join("env");
    let o = drawdown(&["boundaries", "--config", &cfg], Some(&env_dir));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(env_dir.join("boundaries.csv").exists());

    let flag_dir = dir.path().join("flag");
    let env2 = dir.path().join("env2");
    let o = drawdown(
        &[
            "policy",
            "--config",
            &cfg,
            "--out",
            flag_dir.to_str().unwrap(),
        ],
        Some(&env2),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(flag_dir.join("thresholds.csv").exists());
    assert!(flag_dir.join("policy.csv").exists());
    assert!(!env2.exists());
}

#[test]
fn simulate_requires_and_uses_sim_keys() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let cfg = write_cfg(dir.path(), SMALL);
    let o = drawdown(
        &["simulate", "--config", &cfg, "--out", out.to_str().unwrap()],
        None,
    );
    assert_eq!(o.status.code(), Some(1));

    let cfg = write_cfg(
        dir.path(),
        &format!("{SMALL}{SIM}sim.record_paths = true\n"),
    );
    let o = drawdown(
        &["simulate", "--config", &cfg, "--out", out.to_str().unwrap()],
        None,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let result = fs::read_to_string(out.join("sim_result.csv")).unwrap();
    assert_eq!(result.lines().count(), 3);
    let challengers = fs::read_to_string(out.join("challengers.csv")).unwrap();
    assert_eq!(challengers.lines().count(), 5);
    assert!(challengers.lines().nth(2).unwrap().starts_with("optimal,"));
    let paths = fs::read_to_string(out.join("sim_paths.csv")).unwrap();
    assert_eq!(paths.lines().count(), 402);

    let again = dir.path().join("again");
    let o = drawdown(
        &[
            "simulate",
            "--config",
            &cfg,
            "--out",
            again.to_str().unwrap(),
        ],
        None,
    );
    assert!(o.status.success());
    for name in ["sim_result.csv", "challengers.csv", "sim_paths.csv"] {
        assert_eq!(
            fs::read(out.join(name)).unwrap(),
            fs::read(again.join(name)).unwrap()
        );
    }

    let cfg = write_cfg(
        dir.path(),
        &format!("{SMALL}{SIM}").replace("sim.dt = 0.01", "sim.dt = 0.5"),
    );
    let o = drawdown(
        &["simulate", "--config", &cfg, "--out", out.to_str().unwrap()],
        None,
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sweep_alpha_writes_table_and_checks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), SMALL);
    let out = dir.path().join("o");
    let o = drawdown(
        &[
            "sweep-alpha",
            "--config",
            &cfg,
            "--out",
            out.to_str().unwrap(),
            "--alpha-list",
            "0.6,0.3",
        ],
        None,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    for a in ["0.3", "0.6"] {
        let sub = out.join(format!("alpha_{a}"));
        for f in ["boundaries.csv", "thresholds.csv", "policy.csv"] {
            assert!(sub.join(f).exists(), "{a}/{f}");
        }
    }
    let table = fs::read_to_string(out.join("sweep_alpha.csv")).unwrap();
    assert_eq!(
        table.lines().nth(1).unwrap(),
        "alpha,tau,t,S,Z,omega_star,omega_one,omega_alpha"
    );
    // 61 layers per alpha, sorted ascending.
    assert_eq!(table.lines().count(), 2 + 2 * 61);
    assert!(table.lines().nth(2).unwrap().starts_with("2.99"));
    let checks = fs::read_to_string(out.join("sweep_checks.csv")).unwrap();
    assert_eq!(checks.lines().count(), 2 + 3);
    assert!(checks.lines().skip(2).all(|l| l.ends_with(",1")));
}

#[test]
fn verify_reports_every_check() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), SMALL);
    let out = dir.path().join("o");
    let o = drawdown(
        &["verify", "--config", &cfg, "--out", out.to_str().unwrap()],
        None,
    );
    let code = o.status.code().unwrap();
    assert!(code == 0 || code == 3, "{}", stderr(&o));
    let report = fs::read_to_string(out.join("verify_report.csv")).unwrap();
    assert_eq!(
        report.lines().nth(1).unwrap(),
        "group,check,relation,measured,bound,margin,passed"
    );
    let failed = report.lines().skip(2).filter(|l| l.ends_with(",0")).count();
    assert_eq!(code == 3, failed > 0);
    if code == 3 {
        assert!(stderr(&o).contains("invariant"));
    }
    let text = fs::read_to_string(out.join("verify_report.txt")).unwrap();
    assert!(text.contains("[PASS]"));
}
