//! Free boundaries of the dual problem and the reconstruction path
//! `v = phi + integral of w`.
//!
//! `Z(tau)` bounds the region where `v > 0`; `S(tau)` bounds the plateau
//! where `v` is flat in `s`. `phi(tau)` is the plateau height and `w` the
//! `s`-derivative of `v`, obtained from its own obstacle problem.

use thiserror::Error;

use crate::dual_solver::{DualSolution, Regime};
use crate::lattice::{assemble_operator, Lattice};
use crate::model::{obstacle_source_g, ModelParams};
use crate::tridiag::Tridiagonal;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundaryError {
    #[error("{which} boundary moves right between layers {layer} and {next}: {from} -> {to} (allowed slack {slack:e})")]
    NonMonotoneBoundary {
        which: &'static str,
        layer: usize,
        next: usize,
        from: f64,
        to: f64,
        slack: f64,
    },
    #[error("no gradient-region node on layer {layer} (tau = {tau})")]
    EmptyGradientRegion { layer: usize, tau: f64 },
    #[error(
        "obstacle policy iteration did not settle within {max_iter} iterations on layer {layer}"
    )]
    PolicyIterationDiverged { layer: usize, max_iter: usize },
}

/// Function-constraint boundary per layer: the smallest `s` with
/// `v <= tol_v`, refined inside the bracketing cell from the decay of the
/// last positive nodes. `+inf` when no node qualifies.
pub fn extract_z(sol: &DualSolution, tol_v: f64) -> Result<Vec<f64>, BoundaryError> {
    let lat = &sol.lattice;
    let mut z = Vec::with_capacity(sol.n_layers());
    for n in 0..sol.n_layers() {
        let layer = sol.layer(n);
        let zn = match layer.iter().position(|&x| x <= tol_v) {
            None => f64::INFINITY,
            Some(0) => lat.s_nodes[0],
            Some(i) => lat.s_nodes[i - 1] + lat.ds * zero_fraction(layer, i),
        };
        z.push(zn);
    }
    check_decreasing("function-constraint", &z, 2.0 * lat.ds)?;
    Ok(z)
}

/// Gradient boundary per layer, read from the regime labels.
///
/// The discrete plateau consists of the leading GRADIENT nodes plus the
/// first node after them. Its right end jumps by whole cells as `tau`
/// grows, so the per-layer staircase is replaced by the piecewise-linear
/// curve through its crossing points (see [`smooth_staircase`]). Values
/// are clamped to `<= 0`.
pub fn extract_s(sol: &DualSolution) -> Result<Vec<f64>, BoundaryError> {
    let raw = gradient_staircase(sol)?;
    let lat = &sol.lattice;
    let s = smooth_staircase(&lat.tau_nodes, &raw);
    check_decreasing("gradient", &s, 2.0 * lat.ds)?;
    Ok(s)
}

/// Plateau end node position per layer (layer 0 gives 0). Layers without a
/// GRADIENT node are accepted only within two steps of `tau = 0` and are
/// reported at `s = 0`.
pub fn gradient_staircase(sol: &DualSolution) -> Result<Vec<f64>, BoundaryError> {
    let lat = &sol.lattice;
    let mut raw = Vec::with_capacity(sol.n_layers());
    raw.push(0.0);
    for n in 1..sol.n_layers() {
        let labels = sol.regimes(n);
        let k = labels
            .iter()
            .position(|&r| r != Regime::Gradient)
            .unwrap_or(labels.len() - 1);
        if k == 0 {
            let tau = lat.tau_nodes[n];
            if tau > 2.0 * lat.dtau + 1e-12 {
                return Err(BoundaryError::EmptyGradientRegion { layer: n, tau });
            }
            raw.push(0.0);
        } else {
            raw.push(lat.s_nodes[k].min(0.0));
        }
    }
    Ok(raw)
}

/// Piecewise-linear curve through the crossing points of a staircase
/// sampled at `tau`.
///
/// A tread at `r` brackets the boundary in `[r, r + ds)`, so a step down
/// from `r` means the boundary crossed `r` between the two layers. Knots
/// sit at those crossings, starting from `(tau_0, raw_0)`. Past the last
/// crossing the final segment is extended, but never below the current
/// tread.
pub fn smooth_staircase(tau: &[f64], raw: &[f64]) -> Vec<f64> {
    assert_eq!(tau.len(), raw.len());
    let n = raw.len();
    if n < 2 {
        return raw.to_vec();
    }
    let mut knots = vec![(tau[0], raw[0])];
    for m in 1..n {
        if raw[m] < raw[m - 1] {
            knots.push((0.5 * (tau[m - 1] + tau[m]), raw[m - 1]));
        }
    }
    if knots.len() == 1 {
        return raw.to_vec();
    }
    tau.iter()
        .zip(raw)
        .map(|(&t, &r)| interp_knots(&knots, t).min(raw[0]).max(r))
        .collect()
}

fn interp_knots(knots: &[(f64, f64)], t: f64) -> f64 {
    if t <= knots[0].0 {
        return knots[0].1;
    }
    let line = |a: (f64, f64), b: (f64, f64)| a.1 + (b.1 - a.1) * (t - a.0) / (b.0 - a.0);
    for w in knots.windows(2) {
        if t <= w[1].0 {
            return line(w[0], w[1]);
        }
    }
    let m = knots.len();
    line(knots[m - 2], knots[m - 1])
}

/// Position of the zero of `v` inside cell `[i-1, i]` as a fraction of `ds`.
///
/// Fits `v = c (Z - s)^m` through the last three positive nodes. The exponent
/// is 2 where the smooth-fit zone is resolved and drops towards 1 on early
/// layers where it is narrower than a cell. Falls back to linear
/// interpolation when fewer than three increasing values are available.
fn zero_fraction(layer: &[f64], i: usize) -> f64 {
    let linear = || {
        let (a, b) = (layer[i - 1], layer[i]);
        if a > b {
            (a / (a - b)).min(1.0)
        } else {
            1.0
        }
    };
    if i < 3 {
        return linear();
    }
    let (v1, v2, v3) = (layer[i - 1], layer[i - 2], layer[i - 3]);
    if !(v1 > 0.0 && v2 > v1 && v3 > v2) {
        return linear();
    }
    // ln(v2/v1) / ln(v3/v1) = ln((1+f)/f) / ln((2+f)/f), which falls from 1
    // to 1/2 as f grows.
    let target = (v2 / v1).ln() / (v3 / v1).ln();
    let ratio = |f: f64| ((1.0 + f) / f).ln() / ((2.0 + f) / f).ln();
    if target <= ratio(1.0) {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if ratio(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn check_decreasing(which: &'static str, x: &[f64], slack: f64) -> Result<(), BoundaryError> {
    for n in 0..x.len().saturating_sub(1) {
        let (a, b) = (x[n], x[n + 1]);
        let bad = if a.is_infinite() {
            false
        } else {
            b > a + slack
        };
        if bad {
            return Err(BoundaryError::NonMonotoneBoundary {
                which,
                layer: n,
                next: n + 1,
                from: a,
                to: b,
                slack,
            });
        }
    }
    Ok(())
}

/// Inverse `T(s)` of a decreasing boundary `S(tau)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryInverse {
    tau: Vec<f64>,
    s: Vec<f64>,
}

pub fn invert_s_to_t(tau: &[f64], s: &[f64]) -> BoundaryInverse {
    assert_eq!(tau.len(), s.len());
    assert!(!tau.is_empty());
    BoundaryInverse {
        tau: tau.to_vec(),
        s: s.to_vec(),
    }
}

impl BoundaryInverse {
    /// `0` for `s > 0` (and above the first sample); the last `tau` below
    /// the last sample; otherwise the first crossing, linearly interpolated.
    pub fn eval(&self, s: f64) -> f64 {
        if s > 0.0 || s >= self.s[0] {
            return if s > 0.0 { 0.0 } else { self.tau[0] };
        }
        for n in 0..self.s.len() - 1 {
            let (a, b) = (self.s[n], self.s[n + 1]);
            if s <= a && s >= b {
                if a == b {
                    return self.tau[n];
                }
                let f = (a - s) / (a - b);
                return self.tau[n] + f * (self.tau[n + 1] - self.tau[n]);
            }
        }
        *self.tau.last().unwrap()
    }
}

fn phi_rhs(s: f64, params: &ModelParams) -> f64 {
    -(params.k() * s).exp() * (s.exp() - 1.0 / (1.0 - params.p()))
}

/// Plateau height from `phi' + a0 phi = -e^{k S}(e^S - 1/(1-p))`,
/// `phi(0) = p/(1-p)`, via the integrating factor and the trapezoidal rule.
pub fn solve_phi(tau: &[f64], s: &[f64], params: &ModelParams) -> Vec<f64> {
    let d = params.derived();
    let mut phi = Vec::with_capacity(tau.len());
    let mut integral = 0.0;
    phi.push(d.v0);
    for n in 1..tau.len() {
        let f = |m: usize| (d.a0 * tau[m]).exp() * phi_rhs(s[m], params);
        integral += 0.5 * (tau[n] - tau[n - 1]) * (f(n - 1) + f(n));
        phi.push((-d.a0 * tau[n]).exp() * (d.v0 + integral));
    }
    phi
}

/// The same quadrature with the `a0 phi` term dropped:
/// `phi(tau) = p/(1-p) + integral of the right-hand side`.
pub fn solve_phi_without_decay(tau: &[f64], s: &[f64], params: &ModelParams) -> Vec<f64> {
    let v0 = params.derived().v0;
    let mut phi = Vec::with_capacity(tau.len());
    let mut acc = v0;
    phi.push(acc);
    for n in 1..tau.len() {
        acc += 0.5 * (tau[n] - tau[n - 1]) * (phi_rhs(s[n - 1], params) + phi_rhs(s[n], params));
        phi.push(acc);
    }
    phi
}

/// Solves `max{ w_tau - L w - g, w } = 0` with `w(., 0) = 0`, restricted on
/// each layer to the nodes strictly left of `Z(tau)`. Nodes at or beyond `Z`
/// are 0, and the last unknown uses a non-uniform stencil that places the
/// boundary value `w(Z) = 0` at the interpolated position. Layer-major
/// output.
pub fn solve_w_obstacle(
    params: &ModelParams,
    lattice: &Lattice,
    z: &[f64],
    max_iter: usize,
) -> Result<Vec<f64>, BoundaryError> {
    let ns = lattice.n_s;
    let layers = lattice.n_layers();
    assert_eq!(z.len(), layers);
    let op = assemble_operator(params, lattice);
    let a = &op.matrix;
    let g: Vec<f64> = lattice
        .s_nodes
        .iter()
        .map(|&s| obstacle_source_g(s, params))
        .collect();

    let d = params.derived();
    let drift = -d.a1;
    let ds = lattice.ds;
    let mut w = vec![0.0; ns * layers];
    let mut contact = vec![true; ns];
    let mut m = Tridiagonal::zeros(ns);
    let mut rhs = vec![0.0; ns];
    let mut scratch = vec![0.0; ns];
    let mut cur = vec![0.0; ns];
    for n in 1..layers {
        // Nodes strictly left of Z are unknowns; the last one sees the
        // boundary value w(Z) = 0 at distance theta * ds.
        let mut active = lattice.first_node_at_or_right(z[n]).min(ns);
        let mut theta = 1.0;
        if active < ns && active > 0 {
            theta = (z[n] - lattice.s_nodes[active - 1]) / ds;
            if theta < 1e-3 {
                active -= 1;
                theta = 1.0;
            }
        }
        let prev = w[(n - 1) * ns..n * ns].to_vec();
        let row = |i: usize| -> (f64, f64, f64) {
            if i + 1 == active && active < ns {
                let hp = theta * ds;
                let diff_l = 2.0 * d.kappa / (ds * (ds + hp));
                let diff_r = 2.0 * d.kappa / (hp * (ds + hp));
                let (dl, dr) = if drift >= 0.0 {
                    (0.0, drift / hp)
                } else {
                    (-drift / ds, 0.0)
                };
                let lower = if i == 0 { 0.0 } else { -diff_l - dl };
                let ghost = if i == 0 { diff_l + dl } else { 0.0 };
                let diag = 1.0 / op.dtau + d.a0 + diff_l + diff_r + dl + dr - ghost;
                (lower, diag, 0.0)
            } else {
                (a.lower[i], a.diag[i], a.upper[i])
            }
        };
        let eq = |x: &[f64], i: usize| {
            let (l, c, u) = row(i);
            let mut acc = c * x[i];
            if i > 0 {
                acc += l * x[i - 1];
            }
            if i + 1 < ns {
                acc += u * x[i + 1];
            }
            acc - (prev[i] / op.dtau + g[i])
        };
        let mut settled = false;
        for _ in 0..max_iter {
            for i in 0..ns {
                if i >= active || contact[i] {
                    m.set_row(i, 0.0, 1.0, 0.0);
                    rhs[i] = 0.0;
                } else {
                    let (l, c, u) = row(i);
                    m.set_row(i, l, c, u);
                    rhs[i] = prev[i] / op.dtau + g[i];
                }
            }
            m.solve_into(&rhs, &mut scratch, &mut cur);
            let mut changed = false;
            for i in 0..active {
                // max{ eq, w }: switch to the larger branch.
                let e = eq(&cur, i);
                let want_contact = cur[i] > e;
                let (l, c, u) = row(i);
                let scale = (l.abs() + c.abs() + u.abs()) * cur[i].abs().max(prev[i].abs())
                    + prev[i].abs() / op.dtau
                    + g[i].abs();
                let margin = 64.0 * f64::EPSILON * scale;
                if want_contact != contact[i] && (cur[i] - e).abs() > margin {
                    contact[i] = want_contact;
                    changed = true;
                }
            }
            if !changed {
                settled = true;
                break;
            }
        }
        if !settled {
            return Err(BoundaryError::PolicyIterationDiverged { layer: n, max_iter });
        }
        w[n * ns..(n + 1) * ns].copy_from_slice(&cur);
    }
    Ok(w)
}

/// `phi(tau) + integral_{S(tau)}^{s} w` by the trapezoidal rule, and 0 at
/// nodes with `s >= Z(tau)`. Layer-major output.
pub fn reconstruct_v(lattice: &Lattice, w: &[f64], phi: &[f64], s: &[f64], z: &[f64]) -> Vec<f64> {
    let ns = lattice.n_s;
    let ds = lattice.ds;
    let mut out = vec![0.0; w.len()];
    let mut cum = vec![0.0; ns];
    for n in 0..lattice.n_layers() {
        let wl = &w[n * ns..(n + 1) * ns];
        for i in 1..ns {
            cum[i] = cum[i - 1] + 0.5 * ds * (wl[i - 1] + wl[i]);
        }
        let x = ((s[n] - lattice.s_min) / ds).clamp(0.0, (ns - 1) as f64);
        let j = (x.floor() as usize).min(ns - 2);
        let f = x - j as f64;
        // Trapezoid of the linear interpolant of w up to the fractional point.
        let w_at = wl[j] + f * (wl[j + 1] - wl[j]);
        let base = cum[j] + 0.5 * f * ds * (wl[j] + w_at);
        for i in 0..ns {
            out[n * ns + i] = if lattice.s_nodes[i] >= z[n] {
                0.0
            } else {
                phi[n] + cum[i] - base
            };
        }
    }
    out
}

/// Dual free boundaries with the reconstruction ingredients.
#[derive(Debug, Clone)]
pub struct BoundarySet {
    pub tau: Vec<f64>,
    pub z: Vec<f64>,
    pub s: Vec<f64>,
    /// Raw per-layer plateau end before smoothing.
    pub s_staircase: Vec<f64>,
    pub phi: Vec<f64>,
    pub phi_without_decay: Vec<f64>,
    /// Layer-major `w(s_i, tau_n)`.
    pub w: Vec<f64>,
    pub t_of_s: BoundaryInverse,
    n_s: usize,
}

impl BoundarySet {
    pub fn w_layer(&self, n: usize) -> &[f64] {
        &self.w[n * self.n_s..(n + 1) * self.n_s]
    }

    pub fn w(&self, i: usize, n: usize) -> f64 {
        self.w[n * self.n_s + i]
    }

    /// Reconstructed `v` on the solution lattice, layer-major.
    pub fn reconstruct(&self, lattice: &Lattice) -> Vec<f64> {
        reconstruct_v(lattice, &self.w, &self.phi, &self.s, &self.z)
    }
}

/// Runs every extraction step with tolerances tied to `p/(1-p)`.
pub fn extract_boundaries(sol: &DualSolution) -> Result<BoundarySet, BoundaryError> {
    let params = &sol.params;
    let lat = &sol.lattice;
    let tol_v = 1e-8 * params.derived().v0;
    let z = extract_z(sol, tol_v)?;
    let s_staircase = gradient_staircase(sol)?;
    let s = extract_s(sol)?;
    let phi = solve_phi(&lat.tau_nodes, &s, params);
    let phi_without_decay = solve_phi_without_decay(&lat.tau_nodes, &s, params);
    let w = solve_w_obstacle(params, lat, &z, 200)?;
    let t_of_s = invert_s_to_t(&lat.tau_nodes, &s);
    Ok(BoundarySet {
        tau: lat.tau_nodes.clone(),
        z,
        s,
        s_staircase,
        phi,
        phi_without_decay,
        w,
        t_of_s,
        n_s: lat.n_s,
    })
}
