//! Penalty formulation of the same variational inequality, used to
//! cross-check the policy-iteration solver.
//!
//! Each layer solves
//!
//! ```text
//! M v - b = (1/eps) [ max(D+ v, 0) + max(-v, 0) ]
//! ```
//!
//! by semismooth Newton, where `D+ v` is the forward difference. Both penalty
//! terms are monotone, so the generalized Jacobian stays an M-matrix.

use super::{source_vector, DualSolution, LayerStepper, Regime, SolverError, SolverOptions};
use crate::lattice::{assemble_operator, Lattice};
use crate::model::ModelParams;
use crate::tridiag::Tridiagonal;

/// Agreement between the penalized and the exact discrete solutions.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyCrossCheck {
    pub eps: f64,
    pub max_abs_diff: f64,
    /// Largest `|v_pen - v| / (eps * (|h_i| + v0 / dtau))`; stays O(1) when
    /// the penalized solution is within O(eps) of the exact one.
    pub max_scaled_diff: f64,
    pub label_mismatches: usize,
    pub labels_compared: usize,
    pub newton_iterations: usize,
}

/// Penalized solution with labels read off the active penalty terms.
/// `iterations` holds the Newton iteration count per layer.
pub fn penalty_cross_check(
    params: &ModelParams,
    lattice: &Lattice,
    eps: f64,
) -> Result<DualSolution, SolverError> {
    penalty_cross_check_with(params, lattice, eps, &SolverOptions::default())
}

pub fn penalty_cross_check_with(
    params: &ModelParams,
    lattice: &Lattice,
    eps: f64,
    options: &SolverOptions,
) -> Result<DualSolution, SolverError> {
    let max_iter = options.max_iter;
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(SolverError::InvalidPenalty(eps));
    }
    let ns = lattice.n_s;
    let layers = lattice.n_layers();
    let op = assemble_operator(params, lattice);
    let source = source_vector(params, lattice);
    let stepper = LayerStepper::new(&op, &source, lattice);
    let ds = lattice.ds;
    let v0 = params.derived().v0;

    let mut v = vec![0.0; ns * layers];
    let mut regime = vec![Regime::Gradient; ns * layers];
    v[..ns].fill(v0);

    let mut m = Tridiagonal::zeros(ns);
    let mut rhs = vec![0.0; ns];
    let mut scratch = vec![0.0; ns];
    let mut cur = vec![0.0; ns];
    let mut next = vec![0.0; ns];
    let mut active_g = vec![false; ns];
    let mut active_f = vec![false; ns];
    let mut iterations = vec![0; layers];
    for n in 1..layers {
        let prev = v[(n - 1) * ns..n * ns].to_vec();
        cur.copy_from_slice(&prev);
        let mut converged = false;
        for iter in 1..=max_iter {
            iterations[n] = iter;
            for i in 0..ns {
                if !stepper.allowed(i, Regime::Equation) {
                    m.set_row(i, 0.0, 1.0, 0.0);
                    rhs[i] = 0.0;
                    active_g[i] = false;
                    active_f[i] = false;
                    continue;
                }
                stepper.fill_row(&mut m, &mut rhs, &prev, i, Regime::Equation);
                active_g[i] = stepper.allowed(i, Regime::Gradient) && cur[i + 1] > cur[i];
                active_f[i] = cur[i] < 0.0;
                if active_g[i] {
                    m.diag[i] += 1.0 / (eps * ds);
                    m.upper[i] -= 1.0 / (eps * ds);
                }
                if active_f[i] {
                    m.diag[i] += 1.0 / eps;
                }
            }
            m.solve_into(&rhs, &mut scratch, &mut next);
            let same_set = (0..ns).all(|i| {
                let g = stepper.allowed(i, Regime::Gradient) && next[i + 1] > next[i];
                let f = next[i] < 0.0;
                !stepper.allowed(i, Regime::Equation) || (g == active_g[i] && f == active_f[i])
            });
            std::mem::swap(&mut cur, &mut next);
            if same_set {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(SolverError::NewtonDiverged { layer: n, max_iter });
        }
        for i in 0..ns {
            regime[n * ns + i] = if cur[i] <= 0.0 || !stepper.allowed(i, Regime::Equation) {
                Regime::Function
            } else if stepper.allowed(i, Regime::Gradient) && cur[i + 1] >= cur[i] {
                Regime::Gradient
            } else {
                Regime::Equation
            };
        }
        v[n * ns..(n + 1) * ns].copy_from_slice(&cur);
    }
    let mut sol = DualSolution::from_parts(*params, lattice.clone(), v, regime);
    sol.iterations = iterations;
    Ok(sol)
}

/// Solves the penalized problem and compares it with `exact`.
pub fn penalty_comparison(
    exact: &DualSolution,
    eps: f64,
    options: &SolverOptions,
) -> Result<PenaltyCrossCheck, SolverError> {
    let params = &exact.params;
    let lattice = &exact.lattice;
    let pen = penalty_cross_check_with(params, lattice, eps, options)?;
    let newton_iterations = pen.iterations.iter().sum();
    let source = source_vector(params, lattice);
    let v0 = params.derived().v0;
    let mut max_abs_diff = 0.0f64;
    let mut max_scaled_diff = 0.0f64;
    let mut label_mismatches = 0;
    let mut labels_compared = 0;
    for n in 1..exact.n_layers() {
        for i in 0..exact.n_s() {
            let diff = (pen.v(i, n) - exact.v(i, n)).abs();
            max_abs_diff = max_abs_diff.max(diff);
            let scale = eps * (source[i].abs() + v0 / lattice.dtau);
            max_scaled_diff = max_scaled_diff.max(diff / scale);
            labels_compared += 1;
            if pen.regime(i, n) != exact.regime(i, n) {
                label_mismatches += 1;
            }
        }
    }
    Ok(PenaltyCrossCheck {
        eps,
        max_abs_diff,
        max_scaled_diff,
        label_mismatches,
        labels_compared,
        newton_iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_lattice, GridConfig};

    #[test]
    fn rejects_out_of_range_penalty() {
        let params = ModelParams::reference();
        let lat = build_lattice(&params, &GridConfig::new(60, 10)).unwrap();
        for eps in [0.0, -1.0, 2e-3, f64::NAN] {
            assert!(matches!(
                penalty_cross_check(&params, &lat, eps),
                Err(SolverError::InvalidPenalty(_))
            ));
        }
    }

    #[test]
    fn penalized_solution_approaches_exact() {
        let params = ModelParams::reference();
        let lat = build_lattice(&params, &GridConfig::new(200, 40)).unwrap();
        let exact = super::super::solve_v(&params, &lat).unwrap();
        let opts = SolverOptions::default();
        let coarse = penalty_comparison(&exact, 1e-3, &opts).unwrap();
        let fine = penalty_comparison(&exact, 1e-5, &opts).unwrap();
        assert!(coarse.max_scaled_diff < 10.0, "{coarse:?}");
        assert!(fine.max_scaled_diff < 10.0, "{fine:?}");
        assert!(fine.max_abs_diff < coarse.max_abs_diff);
        let per_layer = fine.label_mismatches as f64 / lat.n_tau as f64;
        assert!(per_layer <= 3.0, "{fine:?}");
    }

    #[test]
    fn distance_shrinks_along_eps_sequence() {
        let params = ModelParams::reference();
        let lat = build_lattice(&params, &GridConfig::new(120, 20)).unwrap();
        let exact = super::super::solve_v(&params, &lat).unwrap();
        let opts = SolverOptions::default();
        let d: Vec<f64> = [1e-3, 1e-4, 1e-5]
            .iter()
            .map(|&e| penalty_comparison(&exact, e, &opts).unwrap().max_abs_diff)
            .collect();
        assert!(d[1] < d[0] && d[2] < d[1], "{d:?}");
    }

    #[test]
    fn initial_layer_reproduced() {
        let params = ModelParams::reference();
        let lat = build_lattice(&params, &GridConfig::new(60, 10)).unwrap();
        let pen = penalty_cross_check(&params, &lat, 1e-4).unwrap();
        assert!(pen.layer(0).iter().all(|&x| x == params.derived().v0));
    }

    #[test]
    fn function_region_is_near_zero() {
        let params = ModelParams::reference();
        let lat = build_lattice(&params, &GridConfig::new(150, 30)).unwrap();
        let exact = super::super::solve_v(&params, &lat).unwrap();
        let eps = 1e-4;
        let pen = penalty_cross_check(&params, &lat, eps).unwrap();
        let h = source_vector(&params, &lat);
        let v0 = params.derived().v0;
        for n in 1..exact.n_layers() {
            for i in 0..exact.n_s() {
                if exact.regime(i, n) == Regime::Function {
                    let bound = 2.0 * eps * (h[i].abs() + v0 / lat.dtau);
                    assert!(pen.v(i, n).abs() <= bound, "layer {n} node {i}");
                }
            }
        }
    }
}
