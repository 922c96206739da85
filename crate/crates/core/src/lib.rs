//! Finite-difference solver for optimal consumption and investment under a
//! drawdown constraint on consumption, computed through the dual
//! (Legendre-transformed) value function.

pub mod boundary;
pub mod config;
pub mod dual_solver;
pub mod exec;
pub mod export;
pub mod lattice;
pub mod model;
pub mod pipeline;
pub mod primal;
pub mod simulate;
pub mod tridiag;
pub mod verify;
