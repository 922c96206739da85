//! Brute-force oracle for the dual variational inequality on toy lattices.
//!
//! Each implicit layer is re-solved by trying every assignment of the three
//! regimes to the nodes, building the dense linear system from the model
//! coefficients directly and keeping the assignment whose solution satisfies
//! `min{eq, grad, v} = 0` at every node. Nothing here calls the solver's
//! stepper or tridiagonal code.

#![allow(dead_code)]

use drawdown_core::lattice::{Lattice, RightBoundary};
use drawdown_core::model::{weighted_source, ModelParams};

/// Three parameter sets with different signs of the drift coefficient and
/// different kink positions.
pub fn toy_params() -> Vec<ModelParams> {
    vec![
        ModelParams::reference(),
        ModelParams::new(0.08, 0.25, 0.9, 0.4, 0.3, 2.0).unwrap(),
        ModelParams::new(0.05, 0.3, 0.8, 0.7, 0.6, 0.5).unwrap(),
    ]
}

/// Lattices with 4 to 6 nodes and 1 to 3 steps, wide enough that the
/// gradient, equation and function regimes all show up.
pub fn toy_lattices(params: &ModelParams) -> Vec<Lattice> {
    let sa = params.derived().s_alpha;
    let horizon = params.horizon();
    let mut out = Vec::new();
    for n_s in 4..=6 {
        for n_tau in 1..=3 {
            for (lo, hi) in [(-1.0, sa + 1.0), (-3.0, sa + 4.0), (-0.5, sa + 0.5)] {
                for rb in [RightBoundary::Auto, RightBoundary::DirichletZero] {
                    out.push(Lattice::custom(lo, hi, n_s, horizon, n_tau, rb));
                }
            }
        }
    }
    out
}

/// Gaussian elimination with partial pivoting on a dense row-major system.
pub fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

/// Row `i` of `I / dtau - L` with central diffusion, upwinded drift and
/// reflecting ghosts, as a dense vector.
fn operator_row(params: &ModelParams, lat: &Lattice, i: usize) -> Vec<f64> {
    let d = params.derived();
    let n = lat.n_s;
    let ds = lat.ds;
    let mut row = vec![0.0; n];
    let mut add = |j: isize, c: f64| {
        let j = j.clamp(0, n as isize - 1) as usize;
        row[j] += c;
    };
    let i = i as isize;
    add(i, 1.0 / lat.dtau + d.a0);
    // -kappa v_ss
    let k = d.kappa / (ds * ds);
    add(i - 1, -k);
    add(i, 2.0 * k);
    add(i + 1, -k);
    // +a1 v_s, upwinded on the sign of the velocity -a1
    if -d.a1 >= 0.0 {
        add(i + 1, d.a1 / ds);
        add(i, -d.a1 / ds);
    } else {
        add(i, d.a1 / ds);
        add(i - 1, -d.a1 / ds);
    }
    row
}

/// Outcome of the enumeration on one lattice.
pub struct OracleSolution {
    /// Layer-major values, `n_tau + 1` layers.
    pub v: Vec<f64>,
    /// Number of feasible assignments found on each implicit layer.
    pub feasible: Vec<usize>,
    /// Regime index per node and layer: 0 equation, 1 gradient, 2 function.
    pub regimes: Vec<Vec<usize>>,
    /// Largest difference between two feasible solutions of the same layer.
    pub spread: f64,
}

/// Solves every layer by exhaustive enumeration of regime assignments.
pub fn enumerate_v(params: &ModelParams, lat: &Lattice) -> OracleSolution {
    let n = lat.n_s;
    let ds = lat.ds;
    let dirichlet = lat.right_boundary == RightBoundary::DirichletZero;
    let rows: Vec<Vec<f64>> = (0..n).map(|i| operator_row(params, lat, i)).collect();
    let h: Vec<f64> = lat
        .s_nodes
        .iter()
        .map(|&s| weighted_source(s, params))
        .collect();
    let allowed = |i: usize, r: usize| {
        let last = i + 1 == n;
        match r {
            2 => true,
            _ if last && dirichlet => false,
            1 => !last,
            _ => true,
        }
    };

    let v0 = params.derived().v0;
    let mut v = vec![v0; n];
    let mut feasible = Vec::new();
    let mut regimes = Vec::new();
    let mut prev = v.clone();
    let mut spread: f64 = 0.0;
    for _layer in 1..=lat.n_tau {
        let rhs_eq: Vec<f64> = (0..n).map(|i| prev[i] / lat.dtau - h[i]).collect();
        let mut found: Option<(Vec<f64>, Vec<usize>)> = None;
        let mut count = 0;
        for code in 0..3usize.pow(n as u32) {
            let assign: Vec<usize> = (0..n).map(|i| code / 3usize.pow(i as u32) % 3).collect();
            if (0..n).any(|i| !allowed(i, assign[i])) {
                continue;
            }
            let mut a = vec![vec![0.0; n]; n];
            let mut b = vec![0.0; n];
            for i in 0..n {
                match assign[i] {
                    0 => {
                        a[i] = rows[i].clone();
                        b[i] = rhs_eq[i];
                    }
                    1 => {
                        a[i][i] = 1.0 / ds;
                        a[i][i + 1] = -1.0 / ds;
                    }
                    _ => a[i][i] = 1.0,
                }
            }
            let Some(x) = dense_solve(a, b) else { continue };
            let ok = (0..n).all(|i| {
                let eq: f64 = rows[i].iter().zip(&x).map(|(r, xj)| r * xj).sum::<f64>() - rhs_eq[i];
                let scale = 1.0 + rhs_eq[i].abs() + x[i].abs() / lat.dtau;
                let tol = 1e-11 * scale.max(1.0 / ds);
                let branches = [
                    eq,
                    if i + 1 < n {
                        (x[i] - x[i + 1]) / ds
                    } else {
                        f64::INFINITY
                    },
                    x[i],
                ];
                (0..3)
                    .filter(|&r| allowed(i, r))
                    .all(|r| branches[r] >= -tol)
            });
            if ok {
                count += 1;
                match &found {
                    None => found = Some((x, assign)),
                    Some((y, _)) => {
                        for (a, b) in x.iter().zip(y) {
                            spread = spread.max((a - b).abs());
                        }
                    }
                }
            }
        }
        let (x, assign) = found.expect("no feasible regime assignment");
        feasible.push(count);
        regimes.push(assign);
        v.extend_from_slice(&x);
        prev = x;
    }
    OracleSolution {
        v,
        feasible,
        regimes,
        spread,
    }
}
