//! Dense Cholesky factorization and triangular solves on row-major storage.

use crate::error::{Error, Result};

/// Lower-triangular factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    n: usize,
    lower: Vec<f64>,
}

impl Cholesky {
    /// Factors a symmetric positive definite `n x n` row-major matrix. Only the
    /// lower triangle of `a` is read.
    pub fn factor(a: &[f64], n: usize) -> Result<Self> {
        assert_eq!(a.len(), n * n, "matrix storage does not match dimension");
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let row_j = j * n;
            let mut diag = a[row_j + j];
            for k in 0..j {
                diag -= l[row_j + k] * l[row_j + k];
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(Error::Factorization { pivot: j, value: diag });
            }
            let ljj = diag.sqrt();
            l[row_j + j] = ljj;
            for i in (j + 1)..n {
                let row_i = i * n;
                let mut s = a[row_i + j];
                for k in 0..j {
                    s -= l[row_i + k] * l[row_j + k];
                }
                l[row_i + j] = s / ljj;
            }
        }
        Ok(Cholesky { n, lower: l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    /// Solves `L y = b` in place.
    pub fn solve_lower_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let row = &self.lower[i * n..i * n + i];
            let s: f64 = row.iter().zip(&b[..i]).map(|(l, y)| l * y).sum();
            b[i] = (b[i] - s) / self.lower[i * n + i];
        }
    }

    /// Solves `Lᵀ x = y` in place.
    pub fn solve_upper_in_place(&self, y: &mut [f64]) {
        let n = self.n;
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.lower[k * n + i] * y[k];
            }
            y[i] = s / self.lower[i * n + i];
        }
    }

    /// `xᵀ A⁻¹ x`, evaluated as `|L⁻¹ x|²`.
    pub fn inv_quadratic_form(&self, x: &[f64]) -> f64 {
        let mut y = x.to_vec();
        self.solve_lower_in_place(&mut y);
        y.iter().map(|v| v * v).sum()
    }

    /// Solves `A x = b` with one forward and one backward substitution.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_lower_in_place(&mut x);
        self.solve_upper_in_place(&mut x);
        x
    }
}
