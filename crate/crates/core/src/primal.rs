//! Primal value function `U(omega, t)`, its thresholds and the feedback
//! controls, recovered from the dual solution by inverting
//! `omega = I(y) = -du/dy` on every `t`-layer.
//!
//! With `y = e^s` and `u = e^{-k s} v` the derivatives needed are
//!
//! ```text
//! I     = e^{-s/p} (k v - v_s)
//! u_yy  = e^{-(1+p) s/p} (v_ss - (2-p)/p v_s + (1-p)/p^2 v)
//! ```
//!
//! On the plateau `s <= S` the dual is `u = phi y^{-k}` exactly, so for
//! `omega` beyond the plateau edge `U` has the closed form
//! `omega^{1-p} (k phi)^p / (1-p)`.

use thiserror::Error;

use crate::boundary::BoundarySet;
use crate::dual_solver::{DualSolution, Regime};
use crate::exec::{try_map_indexed, Execution};
use crate::model::ModelParams;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrimalError {
    #[error("dual value is not convex in y on layer {layer} at node {node} (second-derivative factor {value:e})")]
    NonConvexDual {
        layer: usize,
        node: usize,
        value: f64,
    },
    #[error("{which} threshold disagrees with its cross-check by {relative_gap:.3e} (relative) at t = {t}")]
    CrossCheckFailed {
        which: &'static str,
        t: f64,
        relative_gap: f64,
    },
    #[error("omega = {omega} lies outside (0, omega*(t) = {omega_star}] at t = {t}")]
    OutOfDomain { omega: f64, t: f64, omega_star: f64 },
    #[error("omega grid must be positive and strictly increasing")]
    InvalidGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrimalConfig {
    pub n_omega: usize,
    /// Grid spans `[lower_factor * omega_alpha(0), upper_factor * omega*(0)]`.
    pub lower_factor: f64,
    pub upper_factor: f64,
    /// Relative tolerance of the threshold cross-checks.
    pub cross_check_tol: f64,
    /// Smallest tolerated (negative) convexity factor of the dual.
    pub convexity_tol: f64,
    pub exec: Execution,
}

impl Default for PrimalConfig {
    fn default() -> Self {
        Self {
            n_omega: 400,
            lower_factor: 1e-3,
            upper_factor: 2.0,
            cross_check_tol: 0.05,
            convexity_tol: 1e-6,
            exec: Execution::default(),
        }
    }
}

/// `U`, `U_omega = y` and `u_yy(y)` at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrimalPoint {
    pub u: f64,
    pub y: f64,
    pub u_yy: f64,
}

/// Dual data of one layer on `[s_start, Z]`, where `s_start` is the last
/// plateau node. `u` is the nodal dual value and `omega` (= `I`) is strictly
/// decreasing along the table, ending at `(Z, 0, 0)`.
///
/// Between nodes `u` is the cubic Hermite interpolant in `s` with slopes
/// `-e^s I`, and `I` is the one it implies, `-e^{-s} u_s`. Inverting that
/// `I` (rather than a linear one) keeps `U_omega = y` exact, so `U` is
/// concave wherever the implied `I` decreases. Where it does not (cells
/// next to `Z`), `I = I_1 + (I_0 - I_1)(1 - x^gamma)` is used instead,
/// with `gamma` fitted to the nodal increment of `u`.
#[derive(Debug, Clone)]
pub struct DualLayer {
    s: Vec<f64>,
    omega: Vec<f64>,
    u: Vec<f64>,
    /// `None` for the Hermite cubic, `Some(gamma)` for the power shape.
    shape: Vec<Option<f64>>,
    /// Plateau height used for the closed form beyond the first entry.
    plateau: f64,
    k: f64,
    p: f64,
}

/// One table segment `[s0, s0 + h]`.
struct Segment {
    s0: f64,
    h: f64,
    u: [f64; 2],
    /// `h * du/ds` at both ends.
    m: [f64; 2],
    omega: [f64; 2],
    gamma: Option<f64>,
}

impl Segment {
    fn x(&self, s: f64) -> f64 {
        (s - self.s0) / self.h
    }

    fn h0(&self, x: f64) -> f64 {
        let (x2, x3) = (x * x, x * x * x);
        (2.0 * x3 - 3.0 * x2 + 1.0) * self.u[0]
            + (x3 - 2.0 * x2 + x) * self.m[0]
            + (-2.0 * x3 + 3.0 * x2) * self.u[1]
            + (x3 - x2) * self.m[1]
    }

    /// `du/ds` of the Hermite cubic.
    fn h1(&self, x: f64) -> f64 {
        let x2 = x * x;
        ((6.0 * x2 - 6.0 * x) * (self.u[0] - self.u[1])
            + (3.0 * x2 - 4.0 * x + 1.0) * self.m[0]
            + (3.0 * x2 - 2.0 * x) * self.m[1])
            / self.h
    }

    fn h2(&self, x: f64) -> f64 {
        ((12.0 * x - 6.0) * (self.u[0] - self.u[1])
            + (6.0 * x - 4.0) * self.m[0]
            + (6.0 * x - 2.0) * self.m[1])
            / (self.h * self.h)
    }

    /// Whether `u_s - u_ss < 0` (that is, `I` decreasing) on the closed
    /// segment. The expression is quadratic in `x`.
    fn implied_monotone(&self) -> bool {
        let g = |x: f64| self.h1(x) - self.h2(x);
        let (g0, gh, g1) = (g(0.0), g(0.5), g(1.0));
        // Quadratic through three points; check the vertex when inside.
        let a = 2.0 * (g0 - 2.0 * gh + g1);
        let b = -3.0 * g0 + 4.0 * gh - g1;
        let mut worst = g0.max(g1);
        if a != 0.0 {
            let xv = -b / (2.0 * a);
            if (0.0..=1.0).contains(&xv) {
                worst = worst.max(g(xv));
            }
        }
        worst < 0.0
    }

    fn omega_at(&self, s: f64) -> f64 {
        let x = self.x(s);
        match self.gamma {
            None => -(-s).exp() * self.h1(x),
            Some(g) => self.omega[1] + (self.omega[0] - self.omega[1]) * (1.0 - x.powf(g)),
        }
    }

    /// `dI/ds`.
    fn omega_slope(&self, s: f64) -> f64 {
        let x = self.x(s);
        match self.gamma {
            None => (-s).exp() * (self.h1(x) - self.h2(x)),
            Some(g) => -(self.omega[0] - self.omega[1]) * g * x.powf(g - 1.0) / self.h,
        }
    }

    fn dual_at(&self, s: f64) -> f64 {
        let x = self.x(s);
        match self.gamma {
            None => self.h0(x),
            Some(g) => {
                self.u[0] - self.omega[0] * (s.exp() - self.s0.exp())
                    + (self.omega[0] - self.omega[1])
                        * self.h
                        * self.s0.exp()
                        * power_moment(self.h, g, x)
            }
        }
    }

    /// Solves `I(s) = omega` for `omega` between the end values.
    fn invert(&self, omega: f64) -> f64 {
        let frac = ((self.omega[0] - omega) / (self.omega[0] - self.omega[1])).clamp(0.0, 1.0);
        if let Some(g) = self.gamma {
            return self.s0 + self.h * frac.powf(1.0 / g);
        }
        let (mut lo, mut hi) = (self.s0, self.s0 + self.h);
        let mut s = self.s0 + frac * self.h;
        for _ in 0..60 {
            let r = self.omega_at(s) - omega;
            if r > 0.0 {
                lo = s;
            } else {
                hi = s;
            }
            let d = self.omega_slope(s);
            let mut next = if d < 0.0 { s - r / d } else { f64::NAN };
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - s).abs() <= 1e-15 * (1.0 + s.abs()) {
                return next;
            }
            s = next;
        }
        s
    }
}

/// `integral_0^x e^{h t} t^g dt` by its power series (`h` is one cell).
fn power_moment(h: f64, g: f64, x: f64) -> f64 {
    let mut term = x.powf(g + 1.0);
    let mut sum = term / (g + 1.0);
    for n in 1..40 {
        term *= h * x / n as f64;
        let add = term / (g + n as f64 + 1.0);
        sum += add;
        if add.abs() <= 1e-17 * sum.abs() {
            break;
        }
    }
    sum
}

/// Width `h` with `integral_0^h e^r (1 - r/h) dr = target`.
fn linear_tail_width(target: f64) -> f64 {
    let f = |h: f64| (h.exp_m1() - h) / h;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while f(hi) < target {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `gamma` with `integral_{s0}^{s1} e^s I = du` for the power shape, or
/// `None` when `du` is outside the range any decreasing `I` can produce.
fn fit_power_shape(s0: f64, h: f64, o0: f64, o1: f64, du: f64) -> Option<f64> {
    let e = (s0 + h).exp() - s0.exp();
    // du = o0 e - (o0 - o1) h e^{s0} J(gamma); J decreases in gamma.
    let target = (o0 * e - du) / ((o0 - o1) * h * s0.exp());
    let j = |g: f64| power_moment(h, g, 1.0);
    if !(du > o1 * e && du < o0 * e) {
        return None;
    }
    let (mut lo, mut hi) = (-40.0f64, 40.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if j(mid.exp()) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some((0.5 * (lo + hi)).exp())
}

impl DualLayer {
    fn build(sol: &DualSolution, n: usize, z: f64, tol: f64) -> Result<Self, PrimalError> {
        let p = sol.params.p();
        let k = sol.params.k();
        let lat = &sol.lattice;
        let ds = lat.ds;
        let ns = lat.n_s;
        let v = sol.layer(n);
        let regimes = sol.regimes(n);
        let first_free = regimes
            .iter()
            .position(|&r| r != Regime::Gradient)
            .unwrap_or(ns);
        let start = first_free.max(1) - 1;
        let plateau = v[start];
        let tol_v = 1e-8 * sol.params.derived().v0;
        let last = v
            .iter()
            .rposition(|&x| x > tol_v)
            .unwrap_or(start)
            .max(start);
        let at = |i: isize| -> f64 {
            // Reflecting ghost on the left, zero beyond the grid on the right.
            if i < 0 {
                v[(-i) as usize]
            } else if i as usize >= ns {
                0.0
            } else {
                v[i as usize]
            }
        };
        let cap = last - start + 2;
        let mut layer = DualLayer {
            s: Vec::with_capacity(cap),
            omega: Vec::with_capacity(cap),
            u: Vec::with_capacity(cap),
            shape: Vec::with_capacity(cap),
            plateau,
            k,
            p,
        };
        if first_free == ns {
            // Entire layer on the plateau: the closed form applies everywhere.
            return Ok(layer);
        }
        // At the last node before contact the central differences straddle
        // the kink of v at Z. There `v ~ c (Z - s)^2` is used instead: the
        // square root of v is linear through the last two nodes.
        let contact_fit = if z.is_finite() && last > start && last + 1 < ns {
            let (a, b) = (v[last - 1].sqrt(), v[last].sqrt());
            let slope = (a - b) / ds;
            (slope > 0.0).then_some((slope, b))
        } else {
            None
        };
        for i in start..=last {
            let s = lat.s_nodes[i];
            let (vm, v0, vp) = (at(i as isize - 1), v[i], at(i as isize + 1));
            let (vs, vss) = match contact_fit {
                Some((c, r)) if i == last => (-2.0 * c * r, 2.0 * c * c),
                _ => ((vp - vm) / (2.0 * ds), (vp - 2.0 * v0 + vm) / (ds * ds)),
            };
            let q = vss - (2.0 - p) / p * vs + (1.0 - p) / (p * p) * v0;
            if q <= -tol && i > start && i < last {
                return Err(PrimalError::NonConvexDual {
                    layer: n,
                    node: i,
                    value: q,
                });
            }
            let om = (-s / p).exp() * (k * v0 - vs);
            if let Some(&prev) = layer.omega.last() {
                if om >= prev {
                    return Err(PrimalError::NonConvexDual {
                        layer: n,
                        node: i,
                        value: om - prev,
                    });
                }
            }
            layer.s.push(s);
            layer.omega.push(om);
            layer.u.push((-k * s).exp() * v0);
        }
        let s_end = if let Some((c, r)) = contact_fit {
            lat.s_nodes[last] + (r / c).max(1e-3 * ds)
        } else if z.is_finite() {
            z.max(lat.s_nodes[last] + 1e-3 * ds)
        } else {
            lat.s_max + ds
        };
        layer.s.push(s_end);
        layer.omega.push(0.0);
        layer.u.push(0.0);
        let n_seg = layer.s.len() - 1;
        for j in 0..n_seg {
            let seg = layer.segment(j);
            if seg.implied_monotone() {
                layer.shape.push(None);
                continue;
            }
            let du = seg.u[0] - seg.u[1];
            if let Some(g) = fit_power_shape(seg.s0, seg.h, seg.omega[0], seg.omega[1], du) {
                layer.shape.push(Some(g));
            } else if j + 1 == n_seg && du > 0.0 {
                // The interpolated Z is too close for the last increment of
                // u: move it so that I falling linearly to 0 matches.
                layer.s[j + 1] = seg.s0 + linear_tail_width(du / (seg.omega[0] * seg.s0.exp()));
                layer.shape.push(Some(1.0));
            } else {
                return Err(PrimalError::NonConvexDual {
                    layer: n,
                    node: start + j,
                    value: du,
                });
            }
        }
        Ok(layer)
    }

    fn segment(&self, j: usize) -> Segment {
        let h = self.s[j + 1] - self.s[j];
        let slope = |i: usize| -self.s[i].exp() * self.omega[i] * h;
        Segment {
            s0: self.s[j],
            h,
            u: [self.u[j], self.u[j + 1]],
            m: [slope(j), slope(j + 1)],
            omega: [self.omega[j], self.omega[j + 1]],
            gamma: self.shape.get(j).copied().flatten(),
        }
    }

    /// Table nodes `(s, I, u, shape of the segment to the right)`.
    pub fn nodes(&self) -> impl Iterator<Item = (f64, f64, f64, Option<f64>)> + '_ {
        (0..self.s.len()).map(|i| {
            let g = self.shape.get(i).copied().flatten();
            (self.s[i], self.omega[i], self.u[i], g)
        })
    }

    /// Number of segments that use the power shape.
    pub fn power_segments(&self) -> usize {
        self.shape.iter().filter(|g| g.is_some()).count()
    }

    fn plateau_point(&self, omega: f64) -> PrimalPoint {
        let kphi = self.k * self.plateau;
        let y = (kphi / omega).powf(self.p);
        PrimalPoint {
            u: omega.powf(1.0 - self.p) * kphi.powf(self.p) / (1.0 - self.p),
            y,
            u_yy: self.plateau * self.k * (self.k + 1.0) * y.powf(-self.k - 2.0),
        }
    }

    /// `U`, `y` and `u_yy` at `omega`.
    pub fn eval(&self, omega: f64) -> PrimalPoint {
        if omega <= 0.0 {
            let y = self.s.last().map_or(f64::INFINITY, |s| s.exp());
            return PrimalPoint {
                u: 0.0,
                y,
                u_yy: 0.0,
            };
        }
        if self.omega.is_empty() || omega >= self.omega[0] {
            return self.plateau_point(omega);
        }
        // omega[j] > omega >= omega[j+1]
        let j = self.omega.partition_point(|&o| o > omega) - 1;
        let seg = self.segment(j);
        let s = seg.invert(omega);
        let y = s.exp();
        PrimalPoint {
            u: seg.dual_at(s) + omega * y,
            y,
            u_yy: -seg.omega_slope(s) / y,
        }
    }

    fn locate(&self, s: f64) -> Option<Segment> {
        if self.s.is_empty() || s <= self.s[0] || s >= *self.s.last().unwrap() {
            return None;
        }
        let j = self.s.partition_point(|&x| x <= s) - 1;
        Some(self.segment(j))
    }

    /// `I(e^s)` implied by the interpolant, closed form on the plateau.
    pub fn omega_at(&self, s: f64) -> f64 {
        if self.s.is_empty() || s <= self.s[0] {
            return self.k * self.plateau * (-s / self.p).exp();
        }
        self.locate(s).map_or(0.0, |seg| seg.omega_at(s))
    }

    /// Dual value `u(e^s)`.
    pub fn dual_at(&self, s: f64) -> f64 {
        if self.s.is_empty() || s <= self.s[0] {
            return self.plateau * (-self.k * s).exp();
        }
        self.locate(s).map_or(0.0, |seg| seg.dual_at(s))
    }
}

/// Threshold values next to their cross-checks, over `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdChecks {
    /// `-du/dy` at `y = e^S`.
    pub omega_star_dual: Vec<f64>,
    /// Closed forms from `phi`, `w` and `S`.
    pub omega_one_analytic: Vec<f64>,
    pub omega_alpha_analytic: Vec<f64>,
}

impl ThresholdChecks {
    /// Largest relative gap over `0 < t < T` for each threshold:
    /// `[omega*, omega_1, omega_alpha]`.
    pub fn max_relative_gaps(&self, policy: &PrimalPolicy) -> [f64; 3] {
        let n = policy.t_nodes.len();
        let mut out = [0.0f64; 3];
        for j in 1..n.saturating_sub(1) {
            out[0] = out[0].max(rel_gap(policy.omega_star[j], self.omega_star_dual[j]));
            out[1] = out[1].max(rel_gap(policy.omega_one[j], self.omega_one_analytic[j]));
            out[2] = out[2].max(rel_gap(policy.omega_alpha[j], self.omega_alpha_analytic[j]));
        }
        out
    }
}

fn rel_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// Primal solution on a `(t, omega)` table. Rows are `t`-layers in
/// increasing `t`; row `j` is dual layer `N - j`.
#[derive(Debug, Clone)]
pub struct PrimalPolicy {
    pub params: ModelParams,
    pub t_nodes: Vec<f64>,
    pub omega_grid: Vec<f64>,
    /// Row-major `[j][m]`.
    pub u: Vec<f64>,
    pub du_domega: Vec<f64>,
    pub c_star: Vec<f64>,
    pub pi_star: Vec<f64>,
    pub omega_star: Vec<f64>,
    pub omega_one: Vec<f64>,
    pub omega_alpha: Vec<f64>,
    /// `e^{Z}`; `+inf` where `Z` is.
    pub y0: Vec<f64>,
    pub checks: ThresholdChecks,
    layers: Vec<DualLayer>,
}

/// Default grid: log-spaced on `[lower * omega_alpha(0), upper * omega*(0)]`.
pub fn default_omega_grid(omega_alpha0: f64, omega_star0: f64, config: &PrimalConfig) -> Vec<f64> {
    let a = (config.lower_factor * omega_alpha0).ln();
    let b = (config.upper_factor * omega_star0).ln();
    let n = config.n_omega.max(2);
    (0..n)
        .map(|m| (a + (b - a) * m as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Integral of the node-sampled `w` from `a` to `b` (trapezoid on the
/// linear interpolant) and the interpolated `w(b)`.
fn integrate_w(w: &[f64], s_min: f64, ds: f64, a: f64, b: f64) -> (f64, f64) {
    let ns = w.len();
    let w_at = |s: f64| -> f64 {
        let x = ((s - s_min) / ds).clamp(0.0, (ns - 1) as f64);
        let j = (x.floor() as usize).min(ns - 2);
        let f = x - j as f64;
        w[j] + f * (w[j + 1] - w[j])
    };
    if b <= a {
        return (0.0, w_at(b));
    }
    let node = |s: f64| s_min + ds * ((s - s_min) / ds).floor();
    let mut acc = 0.0;
    let mut x = a;
    while x < b {
        let next = (node(x) + ds).min(b).max(x + 1e-15);
        acc += 0.5 * (next - x) * (w_at(x) + w_at(next));
        x = next;
    }
    (acc, w_at(b))
}

/// Builds the primal policy. `omega_grid = None` selects
/// [`default_omega_grid`].
pub fn dual_to_primal(
    sol: &DualSolution,
    bset: &BoundarySet,
    omega_grid: Option<&[f64]>,
    config: &PrimalConfig,
) -> Result<PrimalPolicy, PrimalError> {
    let params = sol.params;
    let lat = &sol.lattice;
    let n_tau = lat.n_tau;
    let p = params.p();
    let k = params.k();
    let alpha = params.alpha();
    let s_alpha = params.derived().s_alpha;
    let horizon = lat.horizon();

    // Row j is dual layer n = n_tau - j.
    let layers = try_map_indexed(config.exec, n_tau + 1, |j| {
        let n = n_tau - j;
        DualLayer::build(sol, n, bset.z[n], config.convexity_tol)
    })?;

    let t_nodes: Vec<f64> = (0..=n_tau)
        .map(|j| horizon - lat.tau_nodes[n_tau - j])
        .collect();
    let mut omega_star = Vec::with_capacity(n_tau + 1);
    let mut omega_one = Vec::with_capacity(n_tau + 1);
    let mut omega_alpha = Vec::with_capacity(n_tau + 1);
    let mut checks = ThresholdChecks {
        omega_star_dual: Vec::with_capacity(n_tau + 1),
        omega_one_analytic: Vec::with_capacity(n_tau + 1),
        omega_alpha_analytic: Vec::with_capacity(n_tau + 1),
    };
    let mut y0 = Vec::with_capacity(n_tau + 1);
    for (j, layer) in layers.iter().enumerate() {
        let n = n_tau - j;
        let s_edge = bset.s[n];
        let phi = bset.phi[n];
        omega_star.push(k * (-s_edge / p).exp() * phi);
        checks.omega_star_dual.push(layer.omega_at(s_edge));
        omega_one.push(layer.omega_at(0.0));
        omega_alpha.push(layer.omega_at(s_alpha));
        let w = bset.w_layer(n);
        let (int0, w0) = integrate_w(w, lat.s_min, lat.ds, s_edge, 0.0);
        checks.omega_one_analytic.push(k * (phi + int0) - w0);
        let (int_a, w_a) = integrate_w(w, lat.s_min, lat.ds, s_edge, s_alpha);
        checks
            .omega_alpha_analytic
            .push(alpha * (k * (phi + int_a) - w_a));
        y0.push(match layer.s.last() {
            Some(&end) if bset.z[n].is_finite() => end.exp(),
            _ => f64::INFINITY,
        });
    }
    for j in 1..n_tau {
        let t = t_nodes[j];
        let pairs = [
            ("omega*", omega_star[j], checks.omega_star_dual[j]),
            ("omega_1", omega_one[j], checks.omega_one_analytic[j]),
            (
                "omega_alpha",
                omega_alpha[j],
                checks.omega_alpha_analytic[j],
            ),
        ];
        for (which, a, b) in pairs {
            let gap = rel_gap(a, b);
            if gap > config.cross_check_tol {
                return Err(PrimalError::CrossCheckFailed {
                    which,
                    t,
                    relative_gap: gap,
                });
            }
        }
    }

    let omega_grid = match omega_grid {
        Some(g) => {
            if g.is_empty() || g[0] <= 0.0 || g.windows(2).any(|w| w[1] <= w[0]) {
                return Err(PrimalError::InvalidGrid);
            }
            g.to_vec()
        }
        None => default_omega_grid(omega_alpha[0], omega_star[0], config),
    };
    let n_omega = omega_grid.len();
    let coef = params.mu() / (params.sigma() * params.sigma());
    let rows = crate::exec::map_indexed(config.exec, n_tau + 1, |j| {
        omega_grid
            .iter()
            .map(|&om| layers[j].eval(om))
            .collect::<Vec<_>>()
    });
    let mut u = Vec::with_capacity(rows.len() * n_omega);
    let mut du = Vec::with_capacity(rows.len() * n_omega);
    let mut c_star = Vec::with_capacity(rows.len() * n_omega);
    let mut pi_star = Vec::with_capacity(rows.len() * n_omega);
    for row in &rows {
        for pt in row {
            u.push(pt.u);
            du.push(pt.y);
            c_star.push(clamp_consumption(pt.y, p, alpha));
            pi_star.push(coef * pt.y * pt.u_yy);
        }
    }
    Ok(PrimalPolicy {
        params,
        t_nodes,
        omega_grid,
        u,
        du_domega: du,
        c_star,
        pi_star,
        omega_star,
        omega_one,
        omega_alpha,
        y0,
        checks,
        layers,
    })
}

/// Largest value on `[w0, w1]` of the cubic Hermite interpolant of
/// `U` (values `f`, slopes `d + y`) minus `omega y`.
fn hermite_max(w0: f64, w1: f64, f: [f64; 2], d: [f64; 2], y: f64) -> f64 {
    let h = w1 - w0;
    let (f0, f1) = (f[0] - w0 * y, f[1] - w1 * y);
    let (m0, m1) = (h * d[0], h * d[1]);
    // H(x) = a x^3 + b x^2 + c x + f0 on x in [0, 1].
    let a = 2.0 * f0 + m0 - 2.0 * f1 + m1;
    let b = -3.0 * f0 - 2.0 * m0 + 3.0 * f1 - m1;
    let c = m0;
    let eval = |x: f64| ((a * x + b) * x + c) * x + f0;
    let mut best = f0.max(f1);
    // Roots of 3a x^2 + 2b x + c.
    let mut roots = Vec::with_capacity(2);
    if a.abs() < 1e-14 * (b.abs() + c.abs()) {
        if b != 0.0 {
            roots.push(-c / (2.0 * b));
        }
    } else {
        let disc = b * b - 3.0 * a * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            roots.push((-b + sq) / (3.0 * a));
            roots.push((-b - sq) / (3.0 * a));
        }
    }
    for x in roots {
        if (0.0..=1.0).contains(&x) {
            best = best.max(eval(x));
        }
    }
    best
}

/// `max{alpha, min{1, y^{-1/p}}}`.
pub fn clamp_consumption(y: f64, p: f64, alpha: f64) -> f64 {
    y.powf(-1.0 / p).clamp(alpha, 1.0)
}

/// Interior statistics of the primal equation residual on the
/// continuation region.
#[derive(Debug, Clone, PartialEq)]
pub struct HjbResidual {
    pub median_abs: f64,
    pub max_abs: f64,
    pub count: usize,
}

impl PrimalPolicy {
    pub fn n_t(&self) -> usize {
        self.t_nodes.len()
    }

    pub fn n_omega(&self) -> usize {
        self.omega_grid.len()
    }

    pub fn idx(&self, j: usize, m: usize) -> usize {
        j * self.omega_grid.len() + m
    }

    pub fn layer(&self, j: usize) -> &DualLayer {
        &self.layers[j]
    }

    /// Bracketing rows and weight of the later one for time `t`, clamped
    /// to `[t_0, t_N]`.
    pub fn t_bracket(&self, t: f64) -> (usize, usize, f64) {
        let n = self.t_nodes.len();
        if n == 1 || t <= self.t_nodes[0] {
            return (0, 0, 0.0);
        }
        if t >= self.t_nodes[n - 1] {
            return (n - 1, n - 1, 0.0);
        }
        let j = self.t_nodes.partition_point(|&x| x <= t) - 1;
        let f = (t - self.t_nodes[j]) / (self.t_nodes[j + 1] - self.t_nodes[j]);
        (j, j + 1, f)
    }

    fn interp_t(&self, series: &[f64], t: f64) -> f64 {
        let (a, b, f) = self.t_bracket(t);
        series[a] + f * (series[b] - series[a])
    }

    /// `omega*(t)`, linear between layers.
    pub fn omega_star_at(&self, t: f64) -> f64 {
        self.interp_t(&self.omega_star, t)
    }

    pub fn omega_one_at(&self, t: f64) -> f64 {
        self.interp_t(&self.omega_one, t)
    }

    pub fn omega_alpha_at(&self, t: f64) -> f64 {
        self.interp_t(&self.omega_alpha, t)
    }

    /// Exact per-layer evaluation, linear in `t` between layers.
    pub fn eval(&self, omega: f64, t: f64) -> PrimalPoint {
        let (a, b, f) = self.t_bracket(t);
        let pa = self.layers[a].eval(omega);
        if f == 0.0 {
            return pa;
        }
        let pb = self.layers[b].eval(omega);
        PrimalPoint {
            u: pa.u + f * (pb.u - pa.u),
            y: pa.y + f * (pb.y - pa.y),
            u_yy: pa.u_yy + f * (pb.u_yy - pa.u_yy),
        }
    }

    fn check_domain(&self, omega: f64, t: f64) -> Result<(), PrimalError> {
        let omega_star = self.omega_star_at(t);
        if !(omega > 0.0) || omega > omega_star * (1.0 + 1e-12) {
            return Err(PrimalError::OutOfDomain {
                omega,
                t,
                omega_star,
            });
        }
        Ok(())
    }

    /// Optimal consumption as a fraction of the reference level.
    pub fn feedback_consumption(&self, omega: f64, t: f64) -> Result<f64, PrimalError> {
        self.check_domain(omega, t)?;
        let y = self.eval(omega, t).y;
        Ok(clamp_consumption(y, self.params.p(), self.params.alpha()))
    }

    /// Optimal risky position as a multiple of the reference level,
    /// `(mu/sigma^2) y u_yy(y)`.
    pub fn feedback_investment(&self, omega: f64, t: f64) -> Result<f64, PrimalError> {
        self.check_domain(omega, t)?;
        let pt = self.eval(omega, t);
        let coef = self.params.mu() / (self.params.sigma() * self.params.sigma());
        Ok((coef * pt.y * pt.u_yy).max(0.0))
    }

    /// `U(omega, t)` for `0 <= omega <= omega*(t)`, extended by the jump
    /// rule `U(omega) = (omega/omega*)^{1-p} U(omega*)` beyond it.
    pub fn value_u(&self, omega: f64, t: f64) -> f64 {
        if omega <= 0.0 {
            return 0.0;
        }
        let omega_star = self.omega_star_at(t);
        if omega > omega_star {
            let edge = self.eval(omega_star, t).u;
            return (omega / omega_star).powf(1.0 - self.params.p()) * edge;
        }
        self.eval(omega, t).u
    }

    /// `V(x, z, t) = z^{1-p} U(x/z, t)`; when `x/z > omega*(t)` the
    /// reference first jumps to `x / omega*(t)`.
    pub fn value_v(&self, x: f64, z: f64, t: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        z.powf(1.0 - self.params.p()) * self.value_u(x / z, t)
    }

    /// `(1-p) U - omega U_omega` on the grid: negative on the continuation
    /// region, zero where the reference jumps.
    pub fn jump_indicator(&self, j: usize, m: usize) -> f64 {
        let i = self.idx(j, m);
        (1.0 - self.params.p()) * self.u[i] - self.omega_grid[m] * self.du_domega[i]
    }

    /// `max_omega [U(omega, t_j) - omega y]` over the table row: the best
    /// grid node, refined inside the two neighbouring cells on the cubic
    /// Hermite interpolant of `(U, U_omega)`.
    pub fn conjugate_on_grid(&self, j: usize, y: f64) -> f64 {
        let nm = self.n_omega();
        let g = |m: usize| self.u[self.idx(j, m)] - self.omega_grid[m] * y;
        let best = (0..nm).max_by(|&a, &b| g(a).total_cmp(&g(b))).unwrap();
        let mut out = g(best);
        for m in [best.wrapping_sub(1), best] {
            if m + 1 >= nm {
                continue;
            }
            let (a, b) = (self.idx(j, m), self.idx(j, m + 1));
            out = out.max(hermite_max(
                self.omega_grid[m],
                self.omega_grid[m + 1],
                [self.u[a], self.u[b]],
                [self.du_domega[a] - y, self.du_domega[b] - y],
                y,
            ));
        }
        out
    }

    /// Residual of
    /// `U_t - (mu^2/2sigma^2) U_w^2/U_ww + c^{1-p}/(1-p) - c U_w - delta U`
    /// from finite differences of the table, at interior nodes strictly
    /// inside the continuation region of the three layers involved.
    pub fn hjb_residual(&self) -> HjbResidual {
        let pr = &self.params;
        let half_sharpe2 = 0.5 * pr.mu() * pr.mu() / (pr.sigma() * pr.sigma());
        let p = pr.p();
        let mut res = Vec::new();
        let nm = self.n_omega();
        for j in 1..self.n_t().saturating_sub(1) {
            let edge = self.omega_star[j - 1]
                .min(self.omega_star[j])
                .min(self.omega_star[j + 1]);
            let dt = self.t_nodes[j + 1] - self.t_nodes[j - 1];
            for m in 1..nm.saturating_sub(1) {
                if self.omega_grid[m + 1] >= edge {
                    break;
                }
                let i = self.idx(j, m);
                let u_t = (self.u[self.idx(j + 1, m)] - self.u[self.idx(j - 1, m)]) / dt;
                let y = self.du_domega[i];
                let u_ww = (self.du_domega[i + 1] - self.du_domega[i - 1])
                    / (self.omega_grid[m + 1] - self.omega_grid[m - 1]);
                if u_ww >= 0.0 {
                    continue;
                }
                let c = clamp_consumption(y, p, pr.alpha());
                let r = u_t - half_sharpe2 * y * y / u_ww + c.powf(1.0 - p) / (1.0 - p)
                    - c * y
                    - pr.delta() * self.u[i];
                res.push(r.abs());
            }
        }
        let count = res.len();
        if count == 0 {
            return HjbResidual {
                median_abs: f64::NAN,
                max_abs: f64::NAN,
                count,
            };
        }
        let max_abs = res.iter().copied().fold(0.0, f64::max);
        let mid = count / 2;
        res.select_nth_unstable_by(mid, f64::total_cmp);
        HjbResidual {
            median_abs: res[mid],
            max_abs,
            count,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary::extract_boundaries;
    use crate::dual_solver::solve_v;
    use crate::lattice::{build_lattice, GridConfig};

    fn policy(n_s: usize, n_tau: usize) -> (DualSolution, PrimalPolicy) {
        let params = ModelParams::reference();
        let lat = build_lattice(&params, &GridConfig::new(n_s, n_tau)).unwrap();
        let sol = solve_v(&params, &lat).unwrap();
        let bset = extract_boundaries(&sol).unwrap();
        let pol = dual_to_primal(&sol, &bset, None, &PrimalConfig::default()).unwrap();
        (sol, pol)
    }

    #[test]
    fn terminal_layer_is_power_utility() {
        let (_, pol) = policy(240, 60);
        let j = pol.n_t() - 1;
        for m in 0..pol.n_omega() {
            let om = pol.omega_grid[m];
            let exact = om.powf(0.5) / 0.5;
            assert!((pol.u[pol.idx(j, m)] - exact).abs() <= 1e-12 * exact.max(1.0));
        }
        assert!((pol.omega_star[j] - 1.0).abs() < 1e-12);
        assert!((pol.omega_one[j] - 1.0).abs() < 1e-12);
        assert!((pol.omega_alpha[j] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn thresholds_ordered() {
        let (sol, pol) = policy(240, 60);
        // omega_1 and omega* coincide while the plateau edge sits at s = 0.
        let tie = 2.0 * sol.lattice.ds;
        for j in 0..pol.n_t() {
            assert!(pol.omega_alpha[j] < pol.omega_one[j], "row {j}");
            assert!(
                pol.omega_one[j] <= pol.omega_star[j] * (1.0 + tie),
                "row {j}: {} > {}",
                pol.omega_one[j],
                pol.omega_star[j]
            );
        }
    }

    #[test]
    fn consumption_clamp_regions() {
        let (_, pol) = policy(240, 60);
        let t = 0.3;
        let wa = pol.omega_alpha_at(t);
        let w1 = pol.omega_one_at(t);
        let alpha = pol.params.alpha();
        assert_eq!(pol.feedback_consumption(0.9 * wa, t).unwrap(), alpha);
        let mid = pol.feedback_consumption(0.5 * (wa + w1), t).unwrap();
        assert!(mid > alpha && mid < 1.0);
        let c1 = pol.feedback_consumption(w1, t).unwrap();
        assert!((c1 - 1.0).abs() < 2e-2, "{c1}");
        let ws = pol.omega_star_at(t);
        assert!(matches!(
            pol.feedback_consumption(1.01 * ws, t),
            Err(PrimalError::OutOfDomain { .. })
        ));
        assert!(pol.feedback_investment(0.5 * ws, t).unwrap() >= 0.0);
    }

    #[test]
    fn value_function_identities() {
        let (_, pol) = policy(240, 60);
        assert_eq!(pol.value_v(0.0, 1.0, 0.2), 0.0);
        for (x, z) in [(0.3, 1.0), (1.0, 1.0), (5.0, 1.0)] {
            let a = pol.value_v(2.0 * x, 2.0 * z, 0.2);
            let b = 2f64.powf(0.5) * pol.value_v(x, z, 0.2);
            assert!((a - b).abs() <= 1e-9 * b.abs(), "{x} {z}");
            let term = pol.value_v(x, z, 1.0);
            assert!((term - x.sqrt() / 0.5).abs() < 1e-9, "{term}");
        }
    }

    #[test]
    fn rejects_bad_grid() {
        let params = ModelParams::reference();
        let lat = build_lattice(&params, &GridConfig::new(120, 20)).unwrap();
        let sol = solve_v(&params, &lat).unwrap();
        let bset = extract_boundaries(&sol).unwrap();
        let cfg = PrimalConfig::default();
        for g in [vec![0.0, 1.0], vec![1.0, 1.0], vec![]] {
            assert_eq!(
                dual_to_primal(&sol, &bset, Some(&g), &cfg).unwrap_err(),
                PrimalError::InvalidGrid
            );
        }
    }
}
