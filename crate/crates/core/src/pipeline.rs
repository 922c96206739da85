//! Solve, extract boundaries and build the primal policy in one call.

use thiserror::Error;

use crate::boundary::{extract_boundaries, BoundaryError, BoundarySet};
use crate::dual_solver::{solve_v, DualSolution, SolverError};
use crate::lattice::{build_lattice, GridConfig, LatticeError};
use crate::model::ModelParams;
use crate::primal::{dual_to_primal, PrimalConfig, PrimalError, PrimalPolicy};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Boundary(#[from] BoundaryError),
    #[error(transparent)]
    Primal(#[from] PrimalError),
}

/// Everything derived from one parameter set on one grid.
#[derive(Debug, Clone)]
pub struct Solved {
    pub sol: DualSolution,
    pub bset: BoundarySet,
    pub policy: PrimalPolicy,
}

impl Solved {
    pub fn params(&self) -> &ModelParams {
        &self.sol.params
    }

    pub fn ds(&self) -> f64 {
        self.sol.lattice.ds
    }

    pub fn dtau(&self) -> f64 {
        self.sol.lattice.dtau
    }
}

/// Dual solve and boundary extraction only.
pub fn solve_dual(
    params: &ModelParams,
    grid: &GridConfig,
) -> Result<(DualSolution, BoundarySet), PipelineError> {
    let lat = build_lattice(params, grid)?;
    let sol = solve_v(params, &lat)?;
    let bset = extract_boundaries(&sol)?;
    Ok((sol, bset))
}

pub fn solve_all(
    params: &ModelParams,
    grid: &GridConfig,
    primal: &PrimalConfig,
) -> Result<Solved, PipelineError> {
    let (sol, bset) = solve_dual(params, grid)?;
    let policy = dual_to_primal(&sol, &bset, None, primal)?;
    Ok(Solved { sol, bset, policy })
}
