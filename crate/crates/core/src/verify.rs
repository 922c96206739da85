//! Invariant checks with measured margins.
//!
//! Each check compares one measured number against a bound; the margin is
//! positive when the check passes. Groups are numbered 1 to 10 as in the
//! README's acceptance table.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::RunConfig;
use crate::dual_solver::{residual_report, Regime};
use crate::model::ModelError;
use crate::pipeline::{solve_all, PipelineError, Solved};
use crate::primal::PrimalPolicy;
use crate::simulate::{
    simulate_challenger, simulate_policy, ConstantConsumption, FeedbackRule, SimConfig, SimError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifyError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    AtMost,
    Below,
    AtLeast,
    Above,
}

impl Relation {
    fn symbol(self) -> &'static str {
        match self {
            Relation::AtMost => "<=",
            Relation::Below => "<",
            Relation::AtLeast => ">=",
            Relation::Above => ">",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub group: u8,
    pub name: String,
    pub measured: f64,
    pub relation: Relation,
    pub bound: f64,
}

impl Check {
    pub fn new(
        group: u8,
        name: impl Into<String>,
        measured: f64,
        relation: Relation,
        bound: f64,
    ) -> Self {
        Self {
            group,
            name: name.into(),
            measured,
            relation,
            bound,
        }
    }

    /// Positive when the relation holds with room to spare.
    pub fn margin(&self) -> f64 {
        match self.relation {
            Relation::AtMost | Relation::Below => self.bound - self.measured,
            Relation::AtLeast | Relation::Above => self.measured - self.bound,
        }
    }

    pub fn passed(&self) -> bool {
        let m = self.margin();
        match self.relation {
            Relation::AtMost | Relation::AtLeast => m >= 0.0,
            Relation::Below | Relation::Above => m > 0.0,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {:>2} {}: {:.6e} {} {:.6e} (margin {:.3e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.group,
            self.name,
            self.measured,
            self.relation.symbol(),
            self.bound,
            self.margin()
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed())
    }

    /// Whether every check of one group passed.
    pub fn group_passed(&self, group: u8) -> bool {
        self.checks
            .iter()
            .filter(|c| c.group == group)
            .all(Check::passed)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        let failed = self.failures().count();
        write!(f, "{} checks, {failed} failed", self.checks.len())
    }
}

fn max_of(it: impl IntoIterator<Item = f64>) -> f64 {
    it.into_iter().fold(f64::NEG_INFINITY, f64::max)
}

fn min_of(it: impl IntoIterator<Item = f64>) -> f64 {
    it.into_iter().fold(f64::INFINITY, f64::min)
}

/// Position of a label in the left-to-right order GRADIENT, EQUATION,
/// FUNCTION.
fn block_rank(r: Regime) -> u8 {
    match r {
        Regime::Gradient => 0,
        Regime::Equation => 1,
        Regime::Function => 2,
    }
}

/// Group 1: branch residuals and contiguous regime blocks.
pub fn complementarity_checks(s: &Solved) -> Vec<Check> {
    let sol = &s.sol;
    let tol = 1e-8 * sol.params.derived().v0;
    let rep = residual_report(sol, tol);
    let broken = (0..sol.n_layers())
        .filter(|&n| {
            sol.regimes(n)
                .windows(2)
                .any(|w| block_rank(w[0]) > block_rank(w[1]))
        })
        .count();
    vec![
        Check::new(
            1,
            "max active-branch residual",
            rep.max_active(),
            Relation::AtMost,
            tol,
        ),
        Check::new(
            1,
            "max violation of inactive branches",
            rep.max_inactive_violation,
            Relation::AtMost,
            tol,
        ),
        Check::new(
            1,
            "layers whose labels are not GRADIENT*EQUATION*FUNCTION",
            broken as f64,
            Relation::AtMost,
            0.0,
        ),
    ]
}

/// Group 2: range of v, monotonicity in tau, and the sign conditions
/// `v_s - k v < 0` and `v_ss - (2-p)/p v_s + (1-p)/p^2 v > 0` below `Z`.
pub fn dual_bound_checks(s: &Solved) -> Vec<Check> {
    let sol = &s.sol;
    let pr = &sol.params;
    let (p, k, v0) = (pr.p(), pr.k(), pr.derived().v0);
    let lat = &sol.lattice;
    let (ns, ds) = (lat.n_s, lat.ds);
    let vals = sol.values();
    let mut tau_rise = f64::NEG_INFINITY;
    for n in 1..sol.n_layers() {
        for i in 0..ns {
            tau_rise = tau_rise.max(sol.v(i, n) - sol.v(i, n - 1));
        }
    }
    let (mut first, mut second) = (f64::INFINITY, f64::INFINITY);
    for n in 0..sol.n_layers() {
        let v = sol.layer(n);
        let z = s.bset.z[n];
        // Reflecting ghost on the left; the last node has no right
        // neighbour and is skipped.
        for i in 0..ns - 1 {
            if lat.s_nodes[i] >= z {
                break;
            }
            let vm = if i == 0 { v[1] } else { v[i - 1] };
            let (vc, vp) = (v[i], v[i + 1]);
            let vs = (vp - vm) / (2.0 * ds);
            let vss = (vp - 2.0 * vc + vm) / (ds * ds);
            first = first.min(k * vc - vs);
            second = second.min(vss - (2.0 - p) / p * vs + (1.0 - p) / (p * p) * vc);
        }
    }
    vec![
        Check::new(
            2,
            "min v",
            min_of(vals.iter().copied()),
            Relation::AtLeast,
            0.0,
        ),
        Check::new(
            2,
            "max v",
            max_of(vals.iter().copied()),
            Relation::AtMost,
            v0,
        ),
        Check::new(
            2,
            "max increase of v over one tau step",
            tau_rise,
            Relation::AtMost,
            1e-10,
        ),
        Check::new(
            2,
            "min of k v - v_s below Z",
            first,
            Relation::AtLeast,
            -1e-6,
        ),
        Check::new(
            2,
            "min of v_ss - (2-p)/p v_s + (1-p)/p^2 v below Z",
            second,
            Relation::AtLeast,
            -1e-6,
        ),
    ]
}

/// Group 3: shapes of `Z` and `S`, and `w < 0` strictly between them.
pub fn boundary_checks(s: &Solved) -> Vec<Check> {
    let b = &s.bset;
    let lat = &s.sol.lattice;
    let ds = lat.ds;
    let s_alpha = s.params().derived().s_alpha;
    let n = b.tau.len();
    let z_rise = max_of(
        (1..n)
            .filter(|&m| b.z[m].is_finite() && b.z[m - 1].is_finite())
            .map(|m| b.z[m] - b.z[m - 1]),
    );
    let z_floor = min_of(b.z.iter().filter(|z| z.is_finite()).map(|z| z - s_alpha));
    let s_rise = max_of((1..n).map(|m| b.s[m] - b.s[m - 1]));
    let mut w_max = f64::NEG_INFINITY;
    for m in 1..n {
        for i in 0..lat.n_s {
            let si = lat.s_nodes[i];
            if si > 2.0 * ds && si < b.z[m] - 2.0 * ds {
                w_max = w_max.max(b.w(i, m));
            }
        }
    }
    vec![
        Check::new(
            3,
            "max rise of Z between layers",
            z_rise,
            Relation::AtMost,
            2.0 * ds,
        ),
        Check::new(3, "min of Z - s_alpha", z_floor, Relation::Above, 0.0),
        Check::new(
            3,
            "max rise of S between layers",
            s_rise,
            Relation::AtMost,
            2.0 * ds,
        ),
        Check::new(
            3,
            "max S",
            max_of(b.s.iter().copied()),
            Relation::AtMost,
            2.0 * ds,
        ),
        Check::new(
            3,
            "|S| on the first layer after tau = 0",
            b.s[1.min(n - 1)].abs(),
            Relation::AtMost,
            2.0 * ds,
        ),
        Check::new(3, "max w on (2ds, Z - 2ds)", w_max, Relation::Below, 0.0),
    ]
}

/// L-infinity distance between the solved and the reconstructed `v`.
pub fn reconstruction_gap(s: &Solved) -> f64 {
    let rec = s.bset.reconstruct(&s.sol.lattice);
    max_of(rec.iter().zip(s.sol.values()).map(|(a, b)| (a - b).abs()))
}

/// Group 4.
pub fn reconstruction_checks(s: &Solved, fine: Option<&Solved>) -> Vec<Check> {
    let gap = reconstruction_gap(s);
    let bound = 5.0 * (s.ds() + s.dtau()) * s.params().derived().v0;
    let mut out = vec![Check::new(
        4,
        "reconstruction gap",
        gap,
        Relation::AtMost,
        bound,
    )];
    if let Some(f) = fine {
        let ratio = gap / reconstruction_gap(f);
        out.push(Check::new(
            4,
            "reconstruction gap ratio under halving",
            ratio,
            Relation::AtLeast,
            1.7,
        ));
    }
    out
}

/// Smallest step increment and largest second divided difference of `U`
/// over all layers.
pub fn primal_shape(pol: &PrimalPolicy) -> (f64, f64) {
    let (mut inc, mut curv) = (f64::INFINITY, f64::NEG_INFINITY);
    let w = &pol.omega_grid;
    for j in 0..pol.n_t() {
        let u = |m: usize| pol.u[pol.idx(j, m)];
        for m in 0..pol.n_omega() - 1 {
            inc = inc.min(u(m + 1) - u(m));
            if m > 0 {
                let d =
                    (u(m + 1) - u(m)) / (w[m + 1] - w[m]) - (u(m) - u(m - 1)) / (w[m] - w[m - 1]);
                curv = curv.max(d);
            }
        }
    }
    (inc, curv)
}

/// Group 6.
pub fn primal_checks(s: &Solved, fine: Option<&Solved>) -> Vec<Check> {
    let pol = &s.policy;
    let tie = 2.0 * s.ds();
    let (inc, curv) = primal_shape(pol);
    let nt = pol.n_t();
    let gap_alpha_one = min_of((0..nt).map(|j| pol.omega_one[j] - pol.omega_alpha[j]));
    let one_over_star = max_of((0..nt).map(|j| pol.omega_one[j] / pol.omega_star[j] - 1.0));
    let star_drop = min_of((1..nt).map(|j| pol.omega_star[j - 1] - pol.omega_star[j]));
    let gaps = pol.checks.max_relative_gaps(pol);
    let names = ["omega*", "omega_1", "omega_alpha"];
    let mut out = vec![
        Check::new(
            6,
            "min increment of U along omega",
            inc,
            Relation::Above,
            0.0,
        ),
        Check::new(
            6,
            "max second divided difference of U",
            curv,
            Relation::Below,
            0.0,
        ),
        Check::new(
            6,
            "min of omega_1 - omega_alpha",
            gap_alpha_one,
            Relation::Above,
            0.0,
        ),
        Check::new(
            6,
            "max of omega_1 / omega* - 1",
            one_over_star,
            Relation::AtMost,
            tie,
        ),
        Check::new(
            6,
            "min decrement of omega* per t step",
            star_drop,
            Relation::Above,
            0.0,
        ),
    ];
    for (g, name) in gaps.iter().zip(names) {
        out.push(Check::new(
            6,
            format!("{name} cross-check relative gap"),
            *g,
            Relation::AtMost,
            0.05,
        ));
    }
    if let Some(f) = fine {
        let fg = f.policy.checks.max_relative_gaps(&f.policy);
        for ((c, g), name) in gaps.iter().zip(fg).zip(names) {
            out.push(Check::new(
                6,
                format!("{name} cross-check gap ratio under halving"),
                c / g,
                Relation::Above,
                1.0,
            ));
        }
    }
    out
}

/// Group 7: `lo` and `hi` solved on the same grid with `alpha_lo < alpha_hi`.
pub fn comparative_checks(lo: &Solved, hi: &Solved) -> Vec<Check> {
    let ds = lo.ds();
    let p = lo.params().p();
    let (bl, bh) = (&lo.bset, &hi.bset);
    let s_rise = max_of((0..bl.s.len()).map(|n| bh.s[n] - bl.s[n]));
    let (pl, ph) = (&lo.policy, &hi.policy);
    // omega* = k e^{-S/p} phi moves by omega*/p per unit of S, so two cells
    // of S translate into 2 ds omega*/p.
    let star = max_of(
        (0..pl.n_t())
            .map(|j| pl.omega_star[j] - ph.omega_star[j] - 2.0 * ds * pl.omega_star[j] / p),
    );
    let oa = min_of((0..pl.n_t()).map(|j| ph.omega_alpha[j] - pl.omega_alpha[j]));
    let tag = format!("alpha {} -> {}", lo.params().alpha(), hi.params().alpha());
    vec![
        Check::new(
            7,
            format!("max of S_hi - S_lo ({tag})"),
            s_rise,
            Relation::AtMost,
            2.0 * ds,
        ),
        Check::new(
            7,
            format!("max of omega*_lo - omega*_hi - 2 ds omega*/p ({tag})"),
            star,
            Relation::AtMost,
            0.0,
        ),
        Check::new(
            7,
            format!("min of omega_alpha_hi - omega_alpha_lo ({tag})"),
            oa,
            Relation::Above,
            0.0,
        ),
    ]
}

/// Worst relative error of `max_omega [U - omega y]` against the dual value
/// at `samples` random `(y, t)`: `t` a layer, `y = e^s` at a lattice node
/// inside the image of the omega grid with `s <= s_alpha`.
pub fn round_trip_error(s: &Solved, samples: usize, seed: u64) -> f64 {
    let pol = &s.policy;
    let sol = &s.sol;
    let lat = &sol.lattice;
    let k = s.params().k();
    let s_alpha = s.params().derived().s_alpha;
    let n_last = lat.n_layers() - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut taken = 0;
    while taken < samples {
        let j = rng.random_range(0..pol.n_t());
        let row = |m: usize| pol.du_domega[pol.idx(j, m)];
        let (y_lo, y_hi) = (row(pol.n_omega() - 1), row(0));
        let nodes: Vec<usize> = (0..lat.n_s)
            .filter(|&i| {
                let si = lat.s_nodes[i];
                si <= s_alpha && si.exp() >= y_lo && si.exp() <= y_hi
            })
            .collect();
        if nodes.is_empty() {
            continue;
        }
        let i = nodes[rng.random_range(0..nodes.len())];
        let si = lat.s_nodes[i];
        let exact = (-k * si).exp() * sol.v(i, n_last - j);
        let got = pol.conjugate_on_grid(j, si.exp());
        worst = worst.max((got - exact).abs() / exact.abs());
        taken += 1;
    }
    worst
}

/// Group 8.
pub fn round_trip_checks(s: &Solved, samples: usize, seed: u64) -> Vec<Check> {
    vec![Check::new(
        8,
        format!("worst relative round-trip error over {samples} samples"),
        round_trip_error(s, samples, seed),
        Relation::AtMost,
        1e-3,
    )]
}

/// Group 9.
pub fn hjb_checks(s: &Solved, fine: Option<&Solved>) -> Vec<Check> {
    let r = s.policy.hjb_residual();
    let mut out = vec![Check::new(
        9,
        "median |HJB residual| on the continuation region",
        r.median_abs,
        Relation::AtMost,
        10.0 * (s.ds() + s.dtau()),
    )];
    if let Some(f) = fine {
        let rf = f.policy.hjb_residual();
        out.push(Check::new(
            9,
            "median HJB residual ratio under halving",
            r.median_abs / rf.median_abs,
            Relation::Above,
            1.0,
        ));
    }
    out
}

/// Start points `x0/z0` used by the Monte Carlo group.
pub fn mc_start_ratios(pol: &PrimalPolicy) -> [f64; 3] {
    [
        0.5 * pol.omega_alpha[0],
        pol.omega_one[0],
        0.9 * pol.omega_star[0],
    ]
}

/// Group 10: optimal policy against `V` at three start points, the two
/// constant-consumption challengers against the optimal policy, and the
/// reflected ratio against `omega*`.
pub fn monte_carlo_checks(pol: &PrimalPolicy, base: &SimConfig) -> Result<Vec<Check>, SimError> {
    let mut out = Vec::new();
    let floor = ConstantConsumption::floor(pol);
    let full = ConstantConsumption::full(pol);
    let rules: [&dyn FeedbackRule; 2] = [&floor, &full];
    for ratio in mc_start_ratios(pol) {
        let cfg = SimConfig {
            x0: ratio * base.z0,
            t0: 0.0,
            ..base.clone()
        };
        let value = pol.value_v(cfg.x0, cfg.z0, 0.0);
        let opt = simulate_policy(pol, &cfg)?;
        let at = format!("x0/z0 = {ratio:.4}");
        out.push(Check::new(
            10,
            format!("|MC mean - V| at {at}"),
            (opt.mean_utility - value).abs(),
            Relation::AtMost,
            3.0 * opt.std_error + 0.02 * value.abs(),
        ));
        for rule in rules {
            let r = simulate_challenger(pol, rule, &cfg)?;
            let pooled = (opt.std_error.powi(2) + r.std_error.powi(2)).sqrt();
            out.push(Check::new(
                10,
                format!("{} mean - optimal mean at {at}", rule.name()),
                r.mean_utility - opt.mean_utility,
                Relation::AtMost,
                3.0 * pooled,
            ));
        }
        out.push(Check::new(
            10,
            format!("max X/z - omega*(t) after t0 at {at}"),
            opt.max_ratio_excess,
            Relation::AtMost,
            2.0 * opt.ratio_slack,
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOptions {
    /// Also solve with both steps halved for the refinement checks.
    pub refine: bool,
    /// Pair of drawdown fractions for the comparative checks.
    pub alphas: Option<(f64, f64)>,
    /// Monte Carlo settings; `None` skips group 10.
    pub sim: Option<SimConfig>,
    pub round_trip_samples: usize,
    pub seed: u64,
}

impl SuiteOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        let alphas = match cfg.sweep_alphas.as_slice() {
            [a, b, ..] => Some((a.min(*b), a.max(*b))),
            _ => None,
        };
        Self {
            refine: true,
            alphas,
            sim: cfg.sim.clone(),
            round_trip_samples: 50,
            seed: cfg.sim.as_ref().map_or(1, |s| s.seed),
        }
    }
}

/// Runs every group except the toy oracle comparison (group 5), which
/// lives in the test suite.
pub fn run_suite(cfg: &RunConfig, opts: &SuiteOptions) -> Result<VerifyReport, VerifyError> {
    let base = solve_all(&cfg.params, &cfg.grid, &cfg.primal)?;
    let fine = if opts.refine {
        Some(solve_all(&cfg.params, &cfg.grid.refined(), &cfg.primal)?)
    } else {
        None
    };
    let mut checks = complementarity_checks(&base);
    checks.extend(dual_bound_checks(&base));
    checks.extend(boundary_checks(&base));
    checks.extend(reconstruction_checks(&base, fine.as_ref()));
    checks.extend(primal_checks(&base, fine.as_ref()));
    if let Some((a, b)) = opts.alphas {
        let solve_at = |alpha: f64| -> Result<Solved, VerifyError> {
            let params = cfg.params.with_alpha(alpha)?;
            Ok(solve_all(&params, &cfg.grid, &cfg.primal)?)
        };
        checks.extend(comparative_checks(&solve_at(a)?, &solve_at(b)?));
    }
    checks.extend(round_trip_checks(&base, opts.round_trip_samples, opts.seed));
    checks.extend(hjb_checks(&base, fine.as_ref()));
    if let Some(sim) = &opts.sim {
        checks.extend(monte_carlo_checks(&base.policy, sim)?);
    }
    Ok(VerifyReport { checks })
}
