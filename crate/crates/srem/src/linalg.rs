//! Dense helpers shared by the fitting code.
//!
//! Design matrices are stored row-major so per-observation work (linear
//! predictors, weighted Gram accumulation) touches contiguous memory;
//! factorizations of the small d x d systems go through nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Row-major dense matrix; one row per observation.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMatrix {
    data: Vec<f64>,
    nrows: usize,
    ncols: usize,
}

impl RowMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        RowMatrix {
            data: vec![0.0; nrows * ncols],
            nrows,
            ncols,
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    /// eta = X gamma
    pub fn matvec(&self, gamma: &DVector<f64>) -> Vec<f64> {
        debug_assert_eq!(gamma.len(), self.ncols);
        let g = gamma.as_slice();
        (0..self.nrows)
            .map(|i| dot(self.row(i), g))
            .collect()
    }

    /// X' r  for a per-row scalar vector r.
    pub fn weighted_column_sum(&self, r: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.ncols);
        for i in 0..self.nrows {
            let ri = r[i];
            if ri == 0.0 {
                continue;
            }
            let row = self.row(i);
            for (o, &x) in out.iter_mut().zip(row) {
                *o += ri * x;
            }
        }
        out
    }

    /// X' W X with W = diag(w); only the upper triangle is accumulated,
    /// then mirrored.
    pub fn weighted_gram(&self, w: &[f64]) -> DMatrix<f64> {
        let d = self.ncols;
        let mut g = DMatrix::<f64>::zeros(d, d);
        for i in 0..self.nrows {
            let wi = w[i];
            if wi == 0.0 {
                continue;
            }
            let row = self.row(i);
            for j in 0..d {
                let wx = wi * row[j];
                if wx == 0.0 {
                    continue;
                }
                for l in j..d {
                    g[(j, l)] += wx * row[l];
                }
            }
        }
        for j in 0..d {
            for l in (j + 1)..d {
                g[(l, j)] = g[(j, l)];
            }
        }
        g
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cholesky solve of the symmetric positive definite system A x = b.
pub fn chol_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("penalized Hessian is not positive definite".into()))?;
    Ok(chol.solve(b))
}

/// Inverse of a symmetric PSD matrix: Cholesky when definite, otherwise a
/// spectral pseudo-inverse with small eigenvalues zeroed. The result stays
/// symmetric PSD either way.
pub fn sym_inverse_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(chol) = a.clone().cholesky() {
        return chol.inverse();
    }
    let eig = a.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let tol = max * 1e-12;
    let d = a.nrows();
    let mut inv = DMatrix::<f64>::zeros(d, d);
    for k in 0..d {
        let lam = eig.eigenvalues[k];
        if lam > tol {
            let u = eig.eigenvectors.column(k);
            let scale = 1.0 / lam;
            for i in 0..d {
                for j in 0..d {
                    inv[(i, j)] += scale * u[i] * u[j];
                }
            }
        }
    }
    inv
}

/// log det of an SPD matrix via Cholesky.
pub fn chol_log_det(a: &DMatrix<f64>) -> Result<f64> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("log-det of a non-SPD matrix".into()))?;
    Ok(2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

/// Largest |eigenvalue| check that `a` is PSD up to a relative tolerance.
pub fn is_psd(a: &DMatrix<f64>, rel_tol: f64) -> bool {
    let eig = a.clone().symmetric_eigen();
    let max = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let floor = -rel_tol * max.max(1.0);
    eig.eigenvalues.iter().all(|&v| v >= floor)
}
