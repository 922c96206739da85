//! Banded (tridiagonal) storage and the Thomas algorithm.
//!
//! Every matrix assembled by the solvers is a weakly chained diagonally
//! dominant M-matrix, for which elimination without pivoting is stable.

/// Tridiagonal matrix: `lower[i]` multiplies `x[i-1]`, `upper[i]` multiplies
/// `x[i+1]`. `lower[0]` and `upper[n-1]` are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct Tridiagonal {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Tridiagonal {
    pub fn zeros(n: usize) -> Self {
        Self {
            lower: vec![0.0; n],
            diag: vec![0.0; n],
            upper: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn set_row(&mut self, i: usize, lower: f64, diag: f64, upper: f64) {
        self.lower[i] = lower;
        self.diag[i] = diag;
        self.upper[i] = upper;
    }

    /// Row `i` of `A x`.
    #[inline]
    pub fn row_dot(&self, i: usize, x: &[f64]) -> f64 {
        let n = self.len();
        let mut acc = self.diag[i] * x[i];
        if i > 0 {
            acc += self.lower[i] * x[i - 1];
        }
        if i + 1 < n {
            acc += self.upper[i] * x[i + 1];
        }
        acc
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.len()).map(|i| self.row_dot(i, x)).collect()
    }

    /// Solves `A x = rhs` in place of a scratch buffer.
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut scratch = vec![0.0; self.len()];
        let mut out = vec![0.0; self.len()];
        self.solve_into(rhs, &mut scratch, &mut out);
        out
    }

    pub fn solve_into(&self, rhs: &[f64], scratch: &mut [f64], out: &mut [f64]) {
        let n = self.len();
        debug_assert_eq!(rhs.len(), n);
        if n == 0 {
            return;
        }
        let c = scratch;
        let x = out;
        let mut pivot = self.diag[0];
        c[0] = if n > 1 { self.upper[0] / pivot } else { 0.0 };
        x[0] = rhs[0] / pivot;
        for i in 1..n {
            pivot = self.diag[i] - self.lower[i] * c[i - 1];
            c[i] = if i + 1 < n {
                self.upper[i] / pivot
            } else {
                0.0
            };
            x[i] = (rhs[i] - self.lower[i] * x[i - 1]) / pivot;
        }
        for i in (0..n - 1).rev() {
            x[i] -= c[i] * x[i + 1];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn solve_inverts_apply(
            n in 2usize..40,
            seed in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.1f64..3.0, -5.0f64..5.0), 40)
        ) {
            let mut a = Tridiagonal::zeros(n);
            let mut x = vec![0.0; n];
            for i in 0..n {
                let (l, u, extra, xi) = seed[i];
                a.set_row(i, -l, l + u + extra, -u);
                x[i] = xi;
            }
            let b = a.apply(&x);
            let y = a.solve(&b);
            for i in 0..n {
                prop_assert!((x[i] - y[i]).abs() < 1e-10);
            }
        }
    }
}
