//! Truncated log-dual space-time grid and the implicit-Euler operator.
//!
//! Spatial nodes are uniform in `s = ln y`. Both source kinks (`s = 0` and
//! `s = -p ln alpha`) fall exactly on nodes: the requested spacing is reduced
//! until `s_alpha / ds` is an integer, and the left end is moved outward to
//! the nearest multiple of `ds`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::model::ModelParams;
use crate::tridiag::Tridiagonal;

pub const MIN_SPACE_NODES: usize = 16;
pub const MIN_TIME_STEPS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatticeError {
    #[error("grid too coarse: n_s = {n_s} (need >= {MIN_SPACE_NODES}), n_tau = {n_tau} (need >= {MIN_TIME_STEPS})")]
    GridTooCoarse { n_s: usize, n_tau: usize },
    #[error("bad s-range [{s_min}, {s_max}]: need s_min < 0 and s_max > s_alpha = {s_alpha}")]
    BadRange {
        s_min: f64,
        s_max: f64,
        s_alpha: f64,
    },
    #[error("unknown right boundary `{0}` (expected `auto` or `dirichlet_zero`)")]
    UnknownBoundary(String),
}

/// Treatment of the truncated right end `s_max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RightBoundary {
    /// Equation with a reflecting ghost node, switched to `v = 0` wherever the
    /// function constraint is active.
    #[default]
    Auto,
    /// `v(s_max, tau) = 0` on every layer after the first.
    DirichletZero,
}

impl FromStr for RightBoundary {
    type Err = LatticeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "auto" => Ok(Self::Auto),
            "dirichlet_zero" => Ok(Self::DirichletZero),
            other => Err(LatticeError::UnknownBoundary(other.to_string())),
        }
    }
}

impl fmt::Display for RightBoundary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Auto => "auto",
            Self::DirichletZero => "dirichlet_zero",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub n_s: usize,
    pub n_tau: usize,
    pub s_min: Option<f64>,
    pub s_max: Option<f64>,
    pub right_boundary: RightBoundary,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            n_s: 1200,
            n_tau: 600,
            s_min: None,
            s_max: None,
            right_boundary: RightBoundary::Auto,
        }
    }
}

impl GridConfig {
    pub fn new(n_s: usize, n_tau: usize) -> Self {
        Self {
            n_s,
            n_tau,
            ..Self::default()
        }
    }

    /// Both step sizes halved (node count doubled minus one).
    pub fn refined(&self) -> Self {
        Self {
            n_s: 2 * self.n_s - 1,
            n_tau: 2 * self.n_tau,
            ..self.clone()
        }
    }

    /// Requested range before kink snapping. Defaults are
    /// `s_min = -max(6, 4 s_alpha)` and `s_max = s_alpha + max(8, 6 s_alpha)`.
    pub fn requested_range(&self, params: &ModelParams) -> (f64, f64) {
        let sa = params.derived().s_alpha;
        let s_min = self.s_min.unwrap_or(-(6f64.max(4.0 * sa)));
        let s_max = self.s_max.unwrap_or(sa + 8f64.max(6.0 * sa));
        (s_min, s_max)
    }
}

/// Uniform grid in `s` and in backward time `tau = T - t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    pub s_min: f64,
    pub s_max: f64,
    pub n_s: usize,
    pub ds: f64,
    /// Number of time steps; there are `n_tau + 1` layers.
    pub n_tau: usize,
    pub dtau: f64,
    pub s_nodes: Vec<f64>,
    pub tau_nodes: Vec<f64>,
    pub right_boundary: RightBoundary,
}

pub fn build_lattice(params: &ModelParams, config: &GridConfig) -> Result<Lattice, LatticeError> {
    if config.n_s < MIN_SPACE_NODES || config.n_tau < MIN_TIME_STEPS {
        return Err(LatticeError::GridTooCoarse {
            n_s: config.n_s,
            n_tau: config.n_tau,
        });
    }
    let sa = params.derived().s_alpha;
    let (s_min, s_max) = config.requested_range(params);
    if !(s_min < 0.0 && s_max > sa) {
        return Err(LatticeError::BadRange {
            s_min,
            s_max,
            s_alpha: sa,
        });
    }
    let ds_requested = (s_max - s_min) / (config.n_s - 1) as f64;
    let cells_to_kink = (sa / ds_requested - 1e-9).ceil().max(1.0);
    let ds = sa / cells_to_kink;
    let left_cells = (-s_min / ds - 1e-9).ceil().max(1.0) as usize;
    let right_cells = (s_max / ds - 1e-9).ceil() as usize;
    let n_s = left_cells + right_cells + 1;
    let s_nodes: Vec<f64> = (0..n_s)
        .map(|i| (i as f64 - left_cells as f64) * ds)
        .collect();
    Ok(Lattice::assemble(
        s_nodes,
        ds,
        params.horizon(),
        config.n_tau,
        config.right_boundary,
    ))
}

impl Lattice {
    /// Grid with arbitrary node count and no kink snapping. Intended for toy
    /// problems and oracle comparisons; production grids come from
    /// [`build_lattice`].
    pub fn custom(
        s_min: f64,
        s_max: f64,
        n_s: usize,
        horizon: f64,
        n_tau: usize,
        right_boundary: RightBoundary,
    ) -> Self {
        assert!(n_s >= 2 && n_tau >= 1 && s_min < s_max && horizon > 0.0);
        let ds = (s_max - s_min) / (n_s - 1) as f64;
        let s_nodes = (0..n_s).map(|i| s_min + i as f64 * ds).collect();
        Self::assemble(s_nodes, ds, horizon, n_tau, right_boundary)
    }

    fn assemble(
        s_nodes: Vec<f64>,
        ds: f64,
        horizon: f64,
        n_tau: usize,
        right_boundary: RightBoundary,
    ) -> Self {
        let dtau = horizon / n_tau as f64;
        let tau_nodes = (0..=n_tau).map(|n| n as f64 * dtau).collect();
        Self {
            s_min: s_nodes[0],
            s_max: *s_nodes.last().unwrap(),
            n_s: s_nodes.len(),
            ds,
            n_tau,
            dtau,
            s_nodes,
            tau_nodes,
            right_boundary,
        }
    }

    pub fn horizon(&self) -> f64 {
        self.tau_nodes[self.n_tau]
    }

    pub fn n_layers(&self) -> usize {
        self.n_tau + 1
    }

    /// Index of the node closest to `s` (clamped to the grid).
    pub fn nearest_node(&self, s: f64) -> usize {
        let x = ((s - self.s_min) / self.ds).round();
        x.clamp(0.0, (self.n_s - 1) as f64) as usize
    }

    /// Index of the first node with `s_i >= s`, or `n_s` if none.
    pub fn first_node_at_or_right(&self, s: f64) -> usize {
        if !s.is_finite() {
            return if s > 0.0 { self.n_s } else { 0 };
        }
        let guess = ((s - self.s_min) / self.ds - 1e-9).ceil();
        if guess <= 0.0 {
            0
        } else {
            (guess as usize).min(self.n_s)
        }
    }
}

/// Banded form of `I / dtau - L` with central diffusion and first-order
/// upwinding of the drift `-a1 v_s`.
///
/// End rows use reflecting ghost nodes (`v_{-1} = v_0`, `v_n = v_{n-1}`), so
/// every row sums to `1 / dtau + a0`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteOperator {
    pub matrix: Tridiagonal,
    pub dtau: f64,
    pub a0: f64,
}

pub fn assemble_operator(params: &ModelParams, lattice: &Lattice) -> DiscreteOperator {
    let d = params.derived();
    let n = lattice.n_s;
    let ds = lattice.ds;
    let diffusion = d.kappa / (ds * ds);
    let drift = -d.a1;
    let (lo_drift, up_drift) = if drift >= 0.0 {
        (0.0, drift / ds)
    } else {
        (-drift / ds, 0.0)
    };
    let lower = -diffusion - lo_drift;
    let upper = -diffusion - up_drift;
    let diag = 1.0 / lattice.dtau + d.a0 - lower - upper;
    let mut matrix = Tridiagonal::zeros(n);
    for i in 0..n {
        let (mut l, mut c, mut u) = (lower, diag, upper);
        if i == 0 {
            c += l;
            l = 0.0;
        }
        if i == n - 1 {
            c += u;
            u = 0.0;
        }
        matrix.set_row(i, l, c, u);
    }
    DiscreteOperator {
        matrix,
        dtau: lattice.dtau,
        a0: d.a0,
    }
}

impl DiscreteOperator {
    /// `(L_h x)_i`, the discrete spatial operator alone.
    pub fn spatial(&self, i: usize, x: &[f64]) -> f64 {
        x[i] / self.dtau - self.matrix.row_dot(i, x)
    }

    pub fn is_m_matrix(&self) -> bool {
        let m = &self.matrix;
        (0..m.len()).all(|i| {
            m.lower[i] <= 0.0
                && m.upper[i] <= 0.0
                && m.diag[i] > 0.0
                && m.diag[i] >= m.lower[i].abs() + m.upper[i].abs() + self.a0 * (1.0 - 1e-12)
        })
    }
}
