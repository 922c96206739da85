//! Monte Carlo check of the synthesized feedback policy.
//!
//! Wealth follows Euler–Maruyama on `dX = (mu pi - c) dt + sigma pi dW`
//! with `c = z c_hat(X/z, t)` and `pi = z pi_hat(X/z, t)`. Under the optimal
//! rule the reference `z` is pushed up by the projection
//! `z <- max(z, X / omega*(t))` after every step.
//!
//! Path pair `i` draws from its own ChaCha stream, so results do not depend
//! on how batches are scheduled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::exec::{map_indexed, Execution};
use crate::primal::{clamp_consumption, PrimalPolicy};

/// Antithetic pairs per reduction chunk. Fixed so the reduction order, and
/// therefore every output bit, is the same in both execution modes.
const CHUNK_PAIRS: usize = 128;

/// Relative change of wealth in one step that is treated as a blow-up.
const UNSTABLE_RATIO: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("unstable step at t={t}: relative wealth change {ratio} exceeds 10 (reduce dt)")]
    UnstableStep { t: f64, ratio: f64 },
    #[error("challenger {name} consumes {c_over_z} z at t={t}, outside [alpha z, z]")]
    InadmissibleChallenger { name: String, t: f64, c_over_z: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub x0: f64,
    pub z0: f64,
    pub t0: f64,
    pub antithetic: bool,
    /// Keep one [`PathRecord`] per path.
    pub record_paths: bool,
    /// Points per layer of the log-omega lookup used for the optimal rule.
    pub table_points: usize,
    pub exec: Execution,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_paths: 100_000,
            dt: 1e-3,
            seed: 20240917,
            x0: 1.0,
            z0: 1.0,
            t0: 0.0,
            antithetic: true,
            record_paths: false,
            table_points: 1024,
            exec: Execution::default(),
        }
    }
}

impl SimConfig {
    /// Checks the config against a solved policy (`dt` may not exceed the
    /// policy's time step).
    pub fn validate(&self, policy: &PrimalPolicy) -> Result<(), SimError> {
        let horizon = policy.params.horizon();
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if self.n_paths < 100 {
            return bad(format!("n_paths = {} must be at least 100", self.n_paths));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return bad(format!("dt = {} must be positive", self.dt));
        }
        let t = &policy.t_nodes;
        if t.len() >= 2 {
            let dtau = (t[t.len() - 1] - t[0]) / (t.len() - 1) as f64;
            if self.dt > dtau * (1.0 + 1e-9) {
                return bad(format!(
                    "dt = {} exceeds the lattice time step {dtau}",
                    self.dt
                ));
            }
        }
        if !(self.x0 >= 0.0) || !self.x0.is_finite() {
            return bad(format!("x0 = {} must be nonnegative", self.x0));
        }
        if !(self.z0 > 0.0) || !self.z0.is_finite() {
            return bad(format!("z0 = {} must be positive", self.z0));
        }
        if !(self.t0 >= 0.0 && self.t0 < horizon) {
            return bad(format!("t0 = {} must lie in [0, {horizon})", self.t0));
        }
        if self.table_points < 16 {
            return bad(format!("table_points = {} is too small", self.table_points));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathRecord {
    pub id: usize,
    /// Bankruptcy time, or the horizon if wealth stayed positive.
    pub exit_time: f64,
    pub payoff: f64,
    pub bankrupt: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub mean_utility: f64,
    pub std_error: f64,
    pub bankruptcy_fraction: f64,
    pub mean_terminal_wealth: f64,
    pub n_paths: usize,
    /// Largest `X/z - omega*(t)` seen at a step start after `t0`.
    pub max_ratio_excess: f64,
    /// One projection slack: the largest per-step move of `omega*` plus
    /// rounding.
    pub ratio_slack: f64,
    /// Number of steps that raised `z`.
    pub z_raises: u64,
    pub paths_summary: Option<Vec<PathRecord>>,
}

/// A feedback rule in reference units: consumption and risky position per
/// unit of `z` as functions of `(omega, t)`.
pub trait FeedbackRule: Sync {
    fn name(&self) -> String;
    fn controls(&self, omega: f64, t: f64) -> (f64, f64);
    /// Reflecting boundary for `X/z`, if the rule ever raises the reference.
    fn boundary(&self, _t: f64) -> Option<f64> {
        None
    }
}

/// Consume a fixed multiple of `z` and hold the Merton fraction of wealth
/// in the risky asset.
#[derive(Debug, Clone)]
pub struct ConstantConsumption {
    pub label: String,
    pub c_over_z: f64,
    pub merton: f64,
}

impl ConstantConsumption {
    /// `c = alpha z`, Merton position.
    pub fn floor(policy: &PrimalPolicy) -> Self {
        Self {
            label: "floor_alpha_z_merton".into(),
            c_over_z: policy.params.alpha(),
            merton: policy.params.merton_fraction(),
        }
    }

    /// `c = z`, Merton position.
    pub fn full(policy: &PrimalPolicy) -> Self {
        Self {
            label: "full_z_merton".into(),
            c_over_z: 1.0,
            merton: policy.params.merton_fraction(),
        }
    }
}

impl FeedbackRule for ConstantConsumption {
    fn name(&self) -> String {
        self.label.clone()
    }
    fn controls(&self, omega: f64, _t: f64) -> (f64, f64) {
        (self.c_over_z, self.merton * omega.max(0.0))
    }
}

/// The optimal rule, tabulated per time layer on a uniform `ln omega` grid
/// and read back bilinearly. `y = U_omega` is interpolated and clamped
/// afterwards, so the consumption kinks at `omega_alpha` and `omega_1` stay
/// sharp.
pub struct OptimalRule<'a> {
    policy: &'a PrimalPolicy,
    ln_lo: f64,
    inv_h: f64,
    n: usize,
    /// `[j][m]` rows of `(y, pi_hat)`.
    table: Vec<[f64; 2]>,
    p: f64,
    alpha: f64,
}

impl<'a> OptimalRule<'a> {
    pub fn new(policy: &'a PrimalPolicy, points: usize, exec: Execution) -> Self {
        let pr = &policy.params;
        let top = policy
            .omega_star
            .iter()
            .cloned()
            .fold(f64::MIN, f64::max)
            .max(f64::MIN_POSITIVE);
        let bottom = policy
            .omega_alpha
            .iter()
            .cloned()
            .fold(f64::MAX, f64::min)
            .min(top);
        let ln_lo = (1e-3 * bottom).ln();
        let ln_hi = (top * (1.0 + 1e-9)).ln();
        let n = points.max(2);
        let h = (ln_hi - ln_lo) / (n - 1) as f64;
        let coef = pr.mu() / (pr.sigma() * pr.sigma());
        let rows = map_indexed(exec, policy.n_t(), |j| {
            let layer = policy.layer(j);
            (0..n)
                .map(|m| {
                    let pt = layer.eval((ln_lo + m as f64 * h).exp());
                    [pt.y, (coef * pt.y * pt.u_yy).max(0.0)]
                })
                .collect::<Vec<_>>()
        });
        Self {
            policy,
            ln_lo,
            inv_h: 1.0 / h,
            n,
            table: rows.into_iter().flatten().collect(),
            p: pr.p(),
            alpha: pr.alpha(),
        }
    }

    fn row_lookup(&self, j: usize, m: usize, f: f64) -> [f64; 2] {
        let a = self.table[j * self.n + m];
        let b = self.table[j * self.n + m + 1];
        [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]
    }
}

impl FeedbackRule for OptimalRule<'_> {
    fn name(&self) -> String {
        "optimal".into()
    }

    fn controls(&self, omega: f64, t: f64) -> (f64, f64) {
        if !(omega > 0.0) {
            return (self.alpha, 0.0);
        }
        let x = (omega.ln() - self.ln_lo) * self.inv_h;
        // Below the table: y is huge (c = alpha) and the position shrinks
        // linearly with omega.
        let (m, f, scale) = if x < 0.0 {
            (0, 0.0, omega / self.ln_lo.exp())
        } else if x >= (self.n - 1) as f64 {
            (self.n - 2, 1.0, 1.0)
        } else {
            let m = x as usize;
            (m, x - m as f64, 1.0)
        };
        let (a, b, w) = self.policy.t_bracket(t);
        let ra = self.row_lookup(a, m, f);
        let [y, pi] = if w == 0.0 {
            ra
        } else {
            let rb = self.row_lookup(b, m, f);
            [ra[0] + w * (rb[0] - ra[0]), ra[1] + w * (rb[1] - ra[1])]
        };
        (clamp_consumption(y, self.p, self.alpha), pi * scale)
    }

    fn boundary(&self, t: f64) -> Option<f64> {
        Some(self.policy.omega_star_at(t))
    }
}

/// Running mean/variance with an order-fixed pairwise merge.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    fn merge(self, o: Moments) -> Moments {
        if self.n == 0.0 {
            return o;
        }
        if o.n == 0.0 {
            return self;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        Moments {
            n,
            mean: self.mean + d * o.n / n,
            m2: self.m2 + o.m2 + d * d * self.n * o.n / n,
        }
    }

    fn std_error(&self) -> f64 {
        if self.n < 2.0 {
            return 0.0;
        }
        (self.m2 / (self.n - 1.0) / self.n).sqrt()
    }
}

#[derive(Debug, Clone, Default)]
struct Chunk {
    /// Per-unit statistics: one unit is a path, or an antithetic pair mean.
    units: Moments,
    paths: usize,
    bankrupt: usize,
    terminal_wealth: f64,
    max_excess: f64,
    z_raises: u64,
    records: Vec<PathRecord>,
}

struct PathOutcome {
    payoff: f64,
    exit_time: f64,
    bankrupt: bool,
    terminal_wealth: f64,
}

struct Stepper<'r> {
    rule: &'r dyn FeedbackRule,
    mu: f64,
    sigma: f64,
    p: f64,
    alpha: f64,
    t0: f64,
    h: f64,
    sqrt_h: f64,
    steps: usize,
    /// `e^{-delta k h}` for `k = 0..=steps`.
    discount: Vec<f64>,
    /// Reflecting boundary at each step time, if any.
    boundary: Option<Vec<f64>>,
    check_admissible: bool,
}

#[derive(Default)]
struct PathStats {
    max_excess: f64,
    z_raises: u64,
}

impl Stepper<'_> {
    fn utility(&self, c: f64) -> f64 {
        if c <= 0.0 {
            0.0
        } else {
            c.powf(1.0 - self.p) / (1.0 - self.p)
        }
    }

    fn run(
        &self,
        x0: f64,
        z0: f64,
        rng: &mut ChaCha8Rng,
        sign: f64,
        draws: &mut Vec<f64>,
        stats: &mut PathStats,
    ) -> Result<PathOutcome, SimError> {
        let fresh = draws.is_empty();
        let mut x = x0;
        let mut z = z0;
        if let Some(b) = &self.boundary {
            if x > z * b[0] {
                z = x / b[0];
            }
        }
        let mut payoff = 0.0;
        if x <= 0.0 {
            return Ok(PathOutcome {
                payoff,
                exit_time: self.t0,
                bankrupt: true,
                terminal_wealth: 0.0,
            });
        }
        for k in 0..self.steps {
            let t = self.t0 + k as f64 * self.h;
            let omega = x / z;
            if let Some(b) = &self.boundary {
                if k > 0 {
                    stats.max_excess = stats.max_excess.max(omega - b[k]);
                }
            }
            let (c_hat, pi_hat) = self.rule.controls(omega, t);
            if self.check_admissible && (c_hat < self.alpha * (1.0 - 1e-12) || c_hat > 1.0 + 1e-12)
            {
                return Err(SimError::InadmissibleChallenger {
                    name: self.rule.name(),
                    t,
                    c_over_z: c_hat,
                });
            }
            let c = z * c_hat;
            let pi = z * pi_hat;
            payoff += self.discount[k] * self.utility(c) * self.h;
            let xi = if fresh {
                let v: f64 = rng.sample(StandardNormal);
                draws.push(v);
                v
            } else {
                draws[k]
            };
            let dx = (self.mu * pi - c) * self.h + self.sigma * pi * self.sqrt_h * sign * xi;
            let ratio = dx.abs() / x.max(z);
            if ratio > UNSTABLE_RATIO {
                return Err(SimError::UnstableStep { t, ratio });
            }
            x += dx;
            if x <= 0.0 {
                if fresh {
                    // Keep the partner path's noise aligned.
                    for _ in k + 1..self.steps {
                        draws.push(rng.sample(StandardNormal));
                    }
                }
                return Ok(PathOutcome {
                    payoff,
                    exit_time: t + self.h,
                    bankrupt: true,
                    terminal_wealth: 0.0,
                });
            }
            if let Some(b) = &self.boundary {
                let edge = b[k + 1];
                if x > z * edge {
                    stats.z_raises += 1;
                    z = x / edge;
                }
            }
        }
        payoff += self.discount[self.steps] * self.utility(x);
        Ok(PathOutcome {
            payoff,
            exit_time: self.t0 + self.steps as f64 * self.h,
            bankrupt: false,
            terminal_wealth: x,
        })
    }
}

fn simulate_rule(
    policy: &PrimalPolicy,
    rule: &dyn FeedbackRule,
    cfg: &SimConfig,
    check_admissible: bool,
) -> Result<SimResult, SimError> {
    cfg.validate(policy)?;
    let pr = &policy.params;
    let horizon = pr.horizon();
    let span = horizon - cfg.t0;
    let steps = ((span / cfg.dt) - 1e-9).ceil().max(0.0) as usize;
    let h = if steps == 0 { 0.0 } else { span / steps as f64 };
    let discount = (0..=steps)
        .map(|k| (-pr.delta() * k as f64 * h).exp())
        .collect();
    let boundary: Option<Vec<f64>> = rule.boundary(cfg.t0).map(|_| {
        (0..=steps)
            .map(|k| rule.boundary(cfg.t0 + k as f64 * h).unwrap())
            .collect()
    });
    let slack = match &boundary {
        Some(b) => {
            let drift = b
                .windows(2)
                .map(|w| (w[1] - w[0]).abs())
                .fold(0.0, f64::max);
            drift + 1e-12 * b.iter().cloned().fold(0.0, f64::max)
        }
        None => 0.0,
    };
    let stepper = Stepper {
        rule,
        mu: pr.mu(),
        sigma: pr.sigma(),
        p: pr.p(),
        alpha: pr.alpha(),
        t0: cfg.t0,
        h,
        sqrt_h: h.sqrt(),
        steps,
        discount,
        boundary,
        check_admissible,
    };

    let per_unit = if cfg.antithetic { 2 } else { 1 };
    let units = cfg.n_paths.div_ceil(per_unit);
    let chunks = units.div_ceil(CHUNK_PAIRS);
    let results = map_indexed(cfg.exec, chunks, |ci| -> Result<Chunk, SimError> {
        let mut out = Chunk::default();
        let mut draws = Vec::with_capacity(steps);
        let mut stats = PathStats::default();
        for unit in ci * CHUNK_PAIRS..((ci + 1) * CHUNK_PAIRS).min(units) {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(unit as u64);
            draws.clear();
            let mut sum = 0.0;
            let mut count = 0;
            for leg in 0..per_unit {
                let id = unit * per_unit + leg;
                if id >= cfg.n_paths {
                    break;
                }
                let sign = if leg == 0 { 1.0 } else { -1.0 };
                let o = stepper.run(cfg.x0, cfg.z0, &mut rng, sign, &mut draws, &mut stats)?;
                sum += o.payoff;
                count += 1;
                out.paths += 1;
                out.bankrupt += o.bankrupt as usize;
                out.terminal_wealth += o.terminal_wealth;
                if cfg.record_paths {
                    out.records.push(PathRecord {
                        id,
                        exit_time: o.exit_time,
                        payoff: o.payoff,
                        bankrupt: o.bankrupt,
                    });
                }
            }
            out.units.push(sum / count as f64);
        }
        out.max_excess = stats.max_excess;
        out.z_raises = stats.z_raises;
        Ok(out)
    });

    let mut total = Chunk {
        max_excess: f64::NEG_INFINITY,
        ..Chunk::default()
    };
    for r in results {
        let c = r?;
        total.units = total.units.merge(c.units);
        total.paths += c.paths;
        total.bankrupt += c.bankrupt;
        total.terminal_wealth += c.terminal_wealth;
        total.max_excess = total.max_excess.max(c.max_excess);
        total.z_raises += c.z_raises;
        total.records.extend(c.records);
    }
    let n = total.paths as f64;
    Ok(SimResult {
        mean_utility: total.units.mean,
        std_error: total.units.std_error(),
        bankruptcy_fraction: total.bankrupt as f64 / n,
        mean_terminal_wealth: total.terminal_wealth / n,
        n_paths: total.paths,
        max_ratio_excess: if stepper.boundary.is_some() && steps > 1 {
            total.max_excess
        } else {
            f64::NEG_INFINITY
        },
        ratio_slack: slack,
        z_raises: total.z_raises,
        paths_summary: cfg.record_paths.then_some(total.records),
    })
}

/// Simulates the optimal feedback policy.
pub fn simulate_policy(policy: &PrimalPolicy, cfg: &SimConfig) -> Result<SimResult, SimError> {
    cfg.validate(policy)?;
    let rule = OptimalRule::new(policy, cfg.table_points, cfg.exec);
    simulate_rule(policy, &rule, cfg, false)
}

/// Simulates an arbitrary rule; consumption outside `[alpha z, z]` is an
/// error.
pub fn simulate_challenger(
    policy: &PrimalPolicy,
    rule: &dyn FeedbackRule,
    cfg: &SimConfig,
) -> Result<SimResult, SimError> {
    simulate_rule(policy, rule, cfg, true)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapEstimate {
    pub mc_mean: f64,
    pub std_error: f64,
    pub value: f64,
    /// `mc_mean - value`.
    pub gap: f64,
}

impl GapEstimate {
    fn new(r: &SimResult, value: f64) -> Self {
        Self {
            mc_mean: r.mean_utility,
            std_error: r.std_error,
            value,
            gap: r.mean_utility - value,
        }
    }
}

/// MC mean of the optimal policy against `V(x0, z0, t0)`.
pub fn estimate_gap(policy: &PrimalPolicy, cfg: &SimConfig) -> Result<GapEstimate, SimError> {
    let r = simulate_policy(policy, cfg)?;
    Ok(GapEstimate::new(&r, policy.value_v(cfg.x0, cfg.z0, cfg.t0)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChallengerRow {
    pub name: String,
    pub estimate: GapEstimate,
}

/// The optimal policy followed by each challenger, all on the same seed.
pub fn run_challengers(
    policy: &PrimalPolicy,
    cfg: &SimConfig,
    challengers: &[&dyn FeedbackRule],
) -> Result<Vec<ChallengerRow>, SimError> {
    let value = policy.value_v(cfg.x0, cfg.z0, cfg.t0);
    let mut rows = vec![ChallengerRow {
        name: "optimal".into(),
        estimate: GapEstimate::new(&simulate_policy(policy, cfg)?, value),
    }];
    for rule in challengers {
        let r = simulate_challenger(policy, *rule, cfg)?;
        rows.push(ChallengerRow {
            name: rule.name(),
            estimate: GapEstimate::new(&r, value),
        });
    }
    Ok(rows)
}
