use super::{DualSolution, Regime};

/// Residual statistics of the active branch over all nodes with one label.
/// `max_abs` and `mean_abs` are `None` when no node carries the label.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeStats {
    pub regime: Regime,
    pub count: usize,
    pub max_abs: Option<f64>,
    pub mean_abs: Option<f64>,
}

/// A node whose labelled branch is not at zero or whose other branches are
/// negative beyond the tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualViolation {
    pub layer: usize,
    pub node: usize,
    pub regime: Regime,
    /// Largest offending magnitude at the node.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualReport {
    pub per_regime: [RegimeStats; 3],
    /// Largest `max(-branch, 0)` over the two unlabelled branches.
    pub max_inactive_violation: f64,
    pub tolerance: f64,
    pub violations: Vec<ResidualViolation>,
}

impl ResidualReport {
    pub fn stats(&self, regime: Regime) -> &RegimeStats {
        &self.per_regime[regime.index()]
    }

    /// Largest active-branch residual over all labels.
    pub fn max_active(&self) -> f64 {
        self.per_regime
            .iter()
            .filter_map(|s| s.max_abs)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Region-wise complementarity residuals of a solved (or modified) solution,
/// using the stored labels. Layers after the initial one only.
pub fn residual_report(sol: &DualSolution, tol: f64) -> ResidualReport {
    let mut sums = [0.0f64; 3];
    let mut maxes = [None::<f64>; 3];
    let mut counts = [0usize; 3];
    let mut max_inactive = 0.0f64;
    let mut violations = Vec::new();
    for n in 1..sol.n_layers() {
        let branches = sol.branch_values(n);
        for (i, b) in branches.iter().enumerate() {
            let label = sol.regime(i, n);
            let k = label.index();
            let active = b[k].abs();
            counts[k] += 1;
            sums[k] += active;
            maxes[k] = Some(maxes[k].map_or(active, |m| m.max(active)));
            let mut worst = if active > tol { active } else { 0.0 };
            for r in Regime::ALL {
                if r != label {
                    let viol = (-b[r.index()]).max(0.0);
                    max_inactive = max_inactive.max(viol);
                    if viol > tol {
                        worst = worst.max(viol);
                    }
                }
            }
            if worst > 0.0 {
                violations.push(ResidualViolation {
                    layer: n,
                    node: i,
                    regime: label,
                    residual: worst,
                });
            }
        }
    }
    let per_regime = Regime::ALL.map(|r| {
        let k = r.index();
        RegimeStats {
            regime: r,
            count: counts[k],
            max_abs: maxes[k],
            mean_abs: (counts[k] > 0).then(|| sums[k] / counts[k] as f64),
        }
    });
    ResidualReport {
        per_regime,
        max_inactive_violation: max_inactive,
        tolerance: tol,
        violations,
    }
}
