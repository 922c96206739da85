//! CSV and binary writers.
//!
//! Every CSV starts with a `# ` metadata comment and a header row. Numbers
//! are written with 17 significant digits; infinities as `inf`/`-inf`, so
//! identical inputs give byte-identical files.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use crate::boundary::BoundarySet;
use crate::dual_solver::DualSolution;
use crate::primal::PrimalPolicy;
use crate::simulate::{ChallengerRow, PathRecord, SimResult};

/// `{:.16e}` for finite values, `inf`, `-inf` or `nan` otherwise.
pub fn fmt_num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "nan".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// One CSV cell.
#[derive(Debug, Clone)]
pub enum Cell {
    Num(f64),
    Int(u64),
    Text(String),
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Num(x)
    }
}

impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Cell::Int(x as u64)
    }
}

impl From<&str> for Cell {
    fn from(x: &str) -> Self {
        Cell::Text(x.to_string())
    }
}

impl From<String> for Cell {
    fn from(x: String) -> Self {
        Cell::Text(x)
    }
}

impl From<bool> for Cell {
    fn from(x: bool) -> Self {
        Cell::Int(x as u64)
    }
}

fn push_cell(line: &mut String, c: &Cell) {
    match c {
        Cell::Num(x) => line.push_str(&fmt_num(*x)),
        Cell::Int(i) => {
            let _ = write!(line, "{i}");
        }
        Cell::Text(t) => {
            if t.contains([',', '"', '\n']) {
                line.push('"');
                line.push_str(&t.replace('"', "\"\""));
                line.push('"');
            } else {
                line.push_str(t);
            }
        }
    }
}

/// Writes a CSV with a metadata comment line and a header row.
pub fn write_csv<I>(path: &Path, metadata: &str, header: &[&str], rows: I) -> io::Result<()>
where
    I: IntoIterator<Item = Vec<Cell>>,
{
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "# {}", metadata.replace('\n', " "))?;
    writeln!(out, "{}", header.join(","))?;
    let mut line = String::new();
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        line.clear();
        for (i, c) in row.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            push_cell(&mut line, c);
        }
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    out.flush()
}

/// Long table `(tau, s, v, regime)` over every lattice node.
pub fn write_dual_csv(path: &Path, metadata: &str, sol: &DualSolution) -> io::Result<()> {
    let lat = &sol.lattice;
    let rows = (0..lat.n_layers()).flat_map(|n| {
        (0..lat.n_s).map(move |i| {
            vec![
                lat.tau_nodes[n].into(),
                lat.s_nodes[i].into(),
                sol.v(i, n).into(),
                sol.regime(i, n).as_str().into(),
            ]
        })
    });
    write_csv(path, metadata, &["tau", "s", "v", "regime"], rows)
}

/// Raw dump of `v`: `u64` LE `n_s`, `u64` LE `n_tau`, then all layers of
/// `f64` LE, layer by layer in `tau`.
pub fn write_dual_binary(path: &Path, sol: &DualSolution) -> io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&(sol.lattice.n_s as u64).to_le_bytes())?;
    out.write_all(&(sol.lattice.n_tau as u64).to_le_bytes())?;
    for x in sol.values() {
        out.write_all(&x.to_le_bytes())?;
    }
    out.flush()
}

/// Reads back [`write_dual_binary`]: `(n_s, n_tau, values)`.
pub fn read_dual_binary(path: &Path) -> io::Result<(usize, usize, Vec<f64>)> {
    let bytes = std::fs::read(path)?;
    let bad = || io::Error::new(io::ErrorKind::InvalidData, "truncated dual dump");
    let word = |i: usize| -> io::Result<[u8; 8]> {
        bytes
            .get(8 * i..8 * i + 8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(bad)
    };
    let n_s = u64::from_le_bytes(word(0)?) as usize;
    let n_tau = u64::from_le_bytes(word(1)?) as usize;
    let len = n_s * (n_tau + 1);
    if bytes.len() != 8 * (2 + len) {
        return Err(bad());
    }
    let values = (0..len)
        .map(|i| word(2 + i).map(f64::from_le_bytes))
        .collect::<io::Result<_>>()?;
    Ok((n_s, n_tau, values))
}

/// Per-layer `(tau, S, Z, phi)`.
pub fn write_boundaries_csv(path: &Path, metadata: &str, b: &BoundarySet) -> io::Result<()> {
    let rows = (0..b.tau.len()).map(|n| {
        vec![
            b.tau[n].into(),
            b.s[n].into(),
            b.z[n].into(),
            b.phi[n].into(),
        ]
    });
    write_csv(path, metadata, &["tau", "S", "Z", "phi"], rows)
}

/// `(t, omega_star, omega_one, omega_alpha)` per layer.
pub fn write_thresholds_csv(path: &Path, metadata: &str, pol: &PrimalPolicy) -> io::Result<()> {
    let rows = (0..pol.n_t()).map(|j| {
        vec![
            pol.t_nodes[j].into(),
            pol.omega_star[j].into(),
            pol.omega_one[j].into(),
            pol.omega_alpha[j].into(),
        ]
    });
    write_csv(
        path,
        metadata,
        &["t", "omega_star", "omega_one", "omega_alpha"],
        rows,
    )
}

/// Long table `(t, omega, U, dU, c_star, pi_star)`.
pub fn write_policy_csv(path: &Path, metadata: &str, pol: &PrimalPolicy) -> io::Result<()> {
    let rows = (0..pol.n_t()).flat_map(|j| {
        (0..pol.n_omega()).map(move |m| {
            let i = pol.idx(j, m);
            vec![
                pol.t_nodes[j].into(),
                pol.omega_grid[m].into(),
                pol.u[i].into(),
                pol.du_domega[i].into(),
                pol.c_star[i].into(),
                pol.pi_star[i].into(),
            ]
        })
    });
    write_csv(
        path,
        metadata,
        &["t", "omega", "U", "dU", "c_star", "pi_star"],
        rows,
    )
}

/// Summary of one optimal-policy run.
pub fn write_sim_result_csv(
    path: &Path,
    metadata: &str,
    r: &SimResult,
    value: f64,
) -> io::Result<()> {
    let row = vec![
        r.n_paths.into(),
        r.mean_utility.into(),
        r.std_error.into(),
        value.into(),
        (r.mean_utility - value).into(),
        r.bankruptcy_fraction.into(),
        r.mean_terminal_wealth.into(),
        r.max_ratio_excess.into(),
        r.ratio_slack.into(),
    ];
    write_csv(
        path,
        metadata,
        &[
            "n_paths",
            "mean_utility",
            "std_error",
            "value",
            "gap",
            "bankruptcy_fraction",
            "mean_terminal_wealth",
            "max_ratio_excess",
            "ratio_slack",
        ],
        [row],
    )
}

/// `(name, mc_mean, std_error, value, gap)` per rule.
pub fn write_challengers_csv(
    path: &Path,
    metadata: &str,
    rows: &[ChallengerRow],
) -> io::Result<()> {
    let rows = rows.iter().map(|r| {
        let e = &r.estimate;
        vec![
            r.name.as_str().into(),
            e.mc_mean.into(),
            e.std_error.into(),
            e.value.into(),
            e.gap.into(),
        ]
    });
    write_csv(
        path,
        metadata,
        &["name", "mc_mean", "std_error", "value", "gap"],
        rows,
    )
}

/// Per-path `(id, exit_time, payoff, bankrupt)`.
pub fn write_paths_csv(path: &Path, metadata: &str, paths: &[PathRecord]) -> io::Result<()> {
    let rows = paths.iter().map(|p| {
        vec![
            p.id.into(),
            p.exit_time.into(),
            p.payoff.into(),
            p.bankrupt.into(),
        ]
    });
    write_csv(
        path,
        metadata,
        &["path_id", "exit_time", "payoff", "bankrupt"],
        rows,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn number_format() {
        assert_eq!(fmt_num(1.0), "1.0000000000000000e0");
        assert_eq!(fmt_num(-0.1), "-1.0000000000000001e-1");
        assert_eq!(fmt_num(f64::INFINITY), "inf");
        assert_eq!(fmt_num(f64::NEG_INFINITY), "-inf");
        // 17 significant digits round-trip.
        let x = std::f64::consts::PI / 7.0;
        assert_eq!(fmt_num(x).parse::<f64>().unwrap(), x);
    }

    #[test]
    fn csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let rows = vec![
            vec![Cell::from(0.5), Cell::from(3usize), Cell::from("a,b")],
            vec![Cell::from(f64::INFINITY), Cell::from(true), Cell::from("x")],
        ];
        write_csv(&path, "alpha=0.5\nn=3", &["x", "n", "label"], rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "# alpha=0.5 n=3\nx,n,label\n5.0000000000000000e-1,3,\"a,b\"\ninf,1,x\n"
        );
    }
}
