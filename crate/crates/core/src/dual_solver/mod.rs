//! Solver for the doubly constrained dual variational inequality
//!
//! ```text
//! min{ v_tau - L v + h(s), -v_s, v } = 0,   v(s, 0) = p / (1 - p),
//! ```
//!
//! where `h(s) = e^{((1-p)/p) s} f~(s)`. Each backward time layer is an
//! implicit-Euler step solved exactly by Howard policy iteration over the
//! three pointwise regimes.

mod penalty;
mod report;

use std::fmt;

use thiserror::Error;

use crate::lattice::{assemble_operator, DiscreteOperator, Lattice, RightBoundary};
use crate::model::{weighted_source, ModelParams};
use crate::tridiag::Tridiagonal;

pub use penalty::{
    penalty_comparison, penalty_cross_check, penalty_cross_check_with, PenaltyCrossCheck,
};
pub use report::{residual_report, RegimeStats, ResidualReport, ResidualViolation};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("policy iteration did not settle within {max_iter} iterations on layer {layer}")]
    PolicyIterationDiverged { layer: usize, max_iter: usize },
    #[error("complementarity tolerance {tol:e} not met on layer {layer} node {node}: {detail}")]
    ToleranceNotMet {
        layer: usize,
        node: usize,
        tol: f64,
        detail: String,
    },
    #[error("semismooth Newton did not converge within {max_iter} iterations on layer {layer}")]
    NewtonDiverged { layer: usize, max_iter: usize },
    #[error("penalty parameter {0} outside (0, 1e-3]")]
    InvalidPenalty(f64),
}

/// Which branch of the three-way minimum is attained at a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Regime {
    Equation,
    Gradient,
    Function,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Equation, Regime::Gradient, Regime::Function];

    pub fn index(self) -> usize {
        match self {
            Regime::Equation => 0,
            Regime::Gradient => 1,
            Regime::Function => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Equation => "EQUATION",
            Regime::Gradient => "GRADIENT",
            Regime::Function => "FUNCTION",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_iter: usize,
    /// Complementarity tolerance; `None` means `1e-8 * p / (1 - p)`.
    pub tol_active: Option<f64>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol_active: None,
        }
    }
}

impl SolverOptions {
    pub fn tolerance(&self, params: &ModelParams) -> f64 {
        self.tol_active.unwrap_or(1e-8 * params.derived().v0)
    }
}

/// `v(s, tau)` on every lattice node together with the active regime labels.
///
/// Storage is layer-major: entry `(i, n)` sits at `n * n_s + i`.
#[derive(Debug, Clone)]
pub struct DualSolution {
    pub params: ModelParams,
    pub lattice: Lattice,
    v: Vec<f64>,
    regime: Vec<Regime>,
    /// Policy iterations used per layer (0 for the initial layer).
    pub iterations: Vec<usize>,
}

impl DualSolution {
    /// Assembles a solution from raw layer-major arrays, e.g. for hand-built
    /// test data.
    pub fn from_parts(
        params: ModelParams,
        lattice: Lattice,
        v: Vec<f64>,
        regime: Vec<Regime>,
    ) -> Self {
        let len = lattice.n_s * lattice.n_layers();
        assert_eq!(v.len(), len, "value array does not match lattice");
        assert_eq!(regime.len(), len, "regime array does not match lattice");
        let iterations = vec![0; lattice.n_layers()];
        Self {
            params,
            lattice,
            v,
            regime,
            iterations,
        }
    }

    pub fn n_s(&self) -> usize {
        self.lattice.n_s
    }

    pub fn n_layers(&self) -> usize {
        self.lattice.n_layers()
    }

    pub fn v(&self, i: usize, n: usize) -> f64 {
        self.v[n * self.lattice.n_s + i]
    }

    pub fn regime(&self, i: usize, n: usize) -> Regime {
        self.regime[n * self.lattice.n_s + i]
    }

    pub fn layer(&self, n: usize) -> &[f64] {
        let ns = self.lattice.n_s;
        &self.v[n * ns..(n + 1) * ns]
    }

    pub fn layer_mut(&mut self, n: usize) -> &mut [f64] {
        let ns = self.lattice.n_s;
        &mut self.v[n * ns..(n + 1) * ns]
    }

    pub fn regimes(&self, n: usize) -> &[Regime] {
        let ns = self.lattice.n_s;
        &self.regime[n * ns..(n + 1) * ns]
    }

    pub fn values(&self) -> &[f64] {
        &self.v
    }

    /// Branch values `[equation, gradient, function]` at every node of layer
    /// `n >= 1`. Unavailable branches (gradient at the right end, anything but
    /// the function branch under a Dirichlet right end) are `+inf`.
    pub fn branch_values(&self, n: usize) -> Vec<[f64; 3]> {
        assert!(n >= 1, "layer 0 is the initial condition");
        let op = assemble_operator(&self.params, &self.lattice);
        let source = source_vector(&self.params, &self.lattice);
        let stepper = LayerStepper::new(&op, &source, &self.lattice);
        let cur = self.layer(n);
        let prev = self.layer(n - 1);
        (0..self.n_s())
            .map(|i| stepper.branches(cur, prev, i))
            .collect()
    }
}

pub(crate) fn source_vector(params: &ModelParams, lattice: &Lattice) -> Vec<f64> {
    lattice
        .s_nodes
        .iter()
        .map(|&s| weighted_source(s, params))
        .collect()
}

/// One implicit step `M v = v_prev / dtau - h` with the constraint rows.
pub(crate) struct LayerStepper<'a> {
    pub op: &'a DiscreteOperator,
    pub source: &'a [f64],
    pub ds: f64,
    pub dirichlet_right: bool,
}

impl<'a> LayerStepper<'a> {
    pub fn new(op: &'a DiscreteOperator, source: &'a [f64], lattice: &Lattice) -> Self {
        Self {
            op,
            source,
            ds: lattice.ds,
            dirichlet_right: lattice.right_boundary == RightBoundary::DirichletZero,
        }
    }

    fn n(&self) -> usize {
        self.source.len()
    }

    #[inline]
    pub fn equation(&self, cur: &[f64], prev: &[f64], i: usize) -> f64 {
        self.op.matrix.row_dot(i, cur) - (prev[i] / self.op.dtau - self.source[i])
    }

    #[inline]
    pub fn branches(&self, cur: &[f64], prev: &[f64], i: usize) -> [f64; 3] {
        let last = i + 1 == self.n();
        if last && self.dirichlet_right {
            return [f64::INFINITY, f64::INFINITY, cur[i]];
        }
        let eq = self.equation(cur, prev, i);
        let grad = if last {
            f64::INFINITY
        } else {
            (cur[i] - cur[i + 1]) / self.ds
        };
        [eq, grad, cur[i]]
    }

    /// Row of the linear system selected by `regime` at node `i`.
    pub fn fill_row(
        &self,
        m: &mut Tridiagonal,
        rhs: &mut [f64],
        prev: &[f64],
        i: usize,
        regime: Regime,
    ) {
        match regime {
            Regime::Equation => {
                let a = &self.op.matrix;
                m.set_row(i, a.lower[i], a.diag[i], a.upper[i]);
                rhs[i] = prev[i] / self.op.dtau - self.source[i];
            }
            Regime::Gradient => {
                m.set_row(i, 0.0, 1.0 / self.ds, -1.0 / self.ds);
                rhs[i] = 0.0;
            }
            Regime::Function => {
                m.set_row(i, 0.0, 1.0, 0.0);
                rhs[i] = 0.0;
            }
        }
    }

    /// Rounding-noise level of each branch at node `i`.
    fn roundoff_scale(&self, cur: &[f64], prev: &[f64], i: usize) -> [f64; 3] {
        let a = &self.op.matrix;
        let vmax = cur[i].abs().max(prev[i].abs()).max(1e-300);
        let eq = (a.lower[i].abs() + a.diag[i].abs() + a.upper[i].abs()) * vmax
            + prev[i].abs() / self.op.dtau
            + self.source[i].abs();
        let grad = 2.0 * vmax / self.ds;
        [
            64.0 * f64::EPSILON * eq,
            64.0 * f64::EPSILON * grad,
            64.0 * f64::EPSILON * vmax,
        ]
    }

    pub fn allowed(&self, i: usize, regime: Regime) -> bool {
        let last = i + 1 == self.n();
        match regime {
            Regime::Function => true,
            _ if last && self.dirichlet_right => false,
            Regime::Gradient => !last,
            Regime::Equation => true,
        }
    }

    /// Solves one layer in place. `policy` holds the initial guess and is
    /// left at the converged regime assignment. Returns the iteration count.
    pub fn solve_layer(
        &self,
        prev: &[f64],
        policy: &mut [Regime],
        out: &mut [f64],
        max_iter: usize,
    ) -> Option<usize> {
        let n = self.n();
        let mut m = Tridiagonal::zeros(n);
        let mut rhs = vec![0.0; n];
        let mut scratch = vec![0.0; n];
        for (i, r) in policy.iter_mut().enumerate() {
            if !self.allowed(i, *r) {
                *r = Regime::Function;
            }
        }
        for iter in 1..=max_iter {
            for i in 0..n {
                self.fill_row(&mut m, &mut rhs, prev, i, policy[i]);
            }
            m.solve_into(&rhs, &mut scratch, out);
            let mut changed = false;
            for i in 0..n {
                let b = self.branches(out, prev, i);
                let scale = self.roundoff_scale(out, prev, i);
                let cur = b[policy[i].index()];
                let (best, best_val) = Regime::ALL
                    .iter()
                    .map(|&r| (r, b[r.index()]))
                    .filter(|&(r, _)| self.allowed(i, r))
                    .fold((policy[i], cur), |acc, x| if x.1 < acc.1 { x } else { acc });
                // Only switch on improvements above the rounding noise of the
                // rows involved; otherwise near-ties at a free boundary cycle.
                let margin = scale[policy[i].index()].max(scale[best.index()]);
                if best != policy[i] && best_val < cur - margin {
                    policy[i] = best;
                    changed = true;
                }
            }
            if !changed {
                return Some(iter);
            }
        }
        None
    }
}

/// Labels a node from its branch values: among branches within `tol` of the
/// minimum, precedence is function, then gradient, then equation.
pub(crate) fn label_node(branches: &[f64; 3], tol: f64) -> Option<Regime> {
    [Regime::Function, Regime::Gradient, Regime::Equation]
        .into_iter()
        .find(|r| branches[r.index()] <= tol)
}

pub fn solve_v(params: &ModelParams, lattice: &Lattice) -> Result<DualSolution, SolverError> {
    solve_v_with(params, lattice, &SolverOptions::default())
}

pub fn solve_v_with(
    params: &ModelParams,
    lattice: &Lattice,
    options: &SolverOptions,
) -> Result<DualSolution, SolverError> {
    let ns = lattice.n_s;
    let layers = lattice.n_layers();
    let tol = options.tolerance(params);
    let op = assemble_operator(params, lattice);
    let source = source_vector(params, lattice);
    let stepper = LayerStepper::new(&op, &source, lattice);

    let v0 = params.derived().v0;
    let mut v = vec![0.0; ns * layers];
    let mut regime = vec![Regime::Gradient; ns * layers];
    let mut iterations = vec![0; layers];
    v[..ns].fill(v0);

    let mut policy = vec![Regime::Equation; ns];
    let mut cur = vec![0.0; ns];
    for n in 1..layers {
        let (done, rest) = v.split_at_mut(n * ns);
        let prev = &done[(n - 1) * ns..];
        let iters = stepper
            .solve_layer(prev, &mut policy, &mut cur, options.max_iter)
            .ok_or(SolverError::PolicyIterationDiverged {
                layer: n,
                max_iter: options.max_iter,
            })?;
        iterations[n] = iters;
        rest[..ns].copy_from_slice(&cur);
        for i in 0..ns {
            let b = stepper.branches(&cur, prev, i);
            let label = label_node(&b, tol).ok_or_else(|| SolverError::ToleranceNotMet {
                layer: n,
                node: i,
                tol,
                detail: format!("no branch within tolerance: {b:?}"),
            })?;
            for r in Regime::ALL {
                if r != label && b[r.index()] < -tol {
                    return Err(SolverError::ToleranceNotMet {
                        layer: n,
                        node: i,
                        tol,
                        detail: format!("{r} branch is {:e}", b[r.index()]),
                    });
                }
            }
            regime[n * ns + i] = label;
        }
    }

    Ok(DualSolution {
        params: *params,
        lattice: lattice.clone(),
        v,
        regime,
        iterations,
    })
}
