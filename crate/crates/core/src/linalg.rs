//! Symmetric positive-(semi)definite matrix helpers used by the covariance
//! updates and the matrix-variate-normal prior terms.

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative jitter applied to every inversion, scaled by the mean diagonal.
pub const DEFAULT_JITTER: f64 = 1e-6;

const EIG_TOL: f64 = 1e-10;
const MIN_TRACE: f64 = 1e-300;

/// Dense symmetric matrix. Entries are symmetrized as `(A + Aᵀ) / 2` on
/// construction so `a[(i, j)] == a[(j, i)]` holds exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::dims("square matrix", m.nrows(), m.ncols()));
        }
        if m.nrows() == 0 {
            return Err(Error::dims("matrix dimension", 1, 0));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure("non-finite matrix entry".into()));
        }
        Ok(Self(symmetrize(m)))
    }

    pub fn identity(dim: usize) -> Self {
        assert!(dim >= 1, "SymMatrix needs dim >= 1");
        Self(DMatrix::identity(dim, dim))
    }

    /// `I / dim`, the trace-one starting point for covariances.
    pub fn scaled_identity(dim: usize) -> Self {
        Self(DMatrix::identity(dim, dim) / dim as f64)
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        let d = nalgebra::DVector::from_column_slice(diag);
        Self::new(DMatrix::from_diagonal(&d))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn mean_diagonal(&self) -> f64 {
        self.trace() / self.dim() as f64
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = SymmetricEigen::new(self.0.clone())
            .eigenvalues
            .iter()
            .copied()
            .collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    /// Absolute jitter for this matrix given a relative factor.
    /// Falls back to the factor itself when the diagonal is all zero.
    pub fn jitter_for(&self, relative: f64) -> f64 {
        let md = self.mean_diagonal();
        if md > 0.0 {
            relative * md
        } else {
            relative
        }
    }
}

impl std::ops::Index<(usize, usize)> for SymMatrix {
    type Output = f64;

    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.0[idx]
    }
}

pub(crate) fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

fn spectral_norm(ev: &[f64]) -> f64 {
    ev.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Principal square root of a PSD matrix by symmetric eigendecomposition.
///
/// Eigenvalues in `[-1e-10 * ‖a‖₂, 0)` are clamped to zero; anything more
/// negative is rejected.
pub fn sym_sqrt(a: &SymMatrix) -> Result<SymMatrix> {
    let eig = SymmetricEigen::new(a.matrix().clone());
    let ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let tol = EIG_TOL * spectral_norm(&ev);
    let mut roots = Vec::with_capacity(ev.len());
    for &v in &ev {
        if v < -tol {
            return Err(Error::NonPsd { min_eigenvalue: v });
        }
        roots.push(v.max(0.0).sqrt());
    }
    let v = &eig.eigenvectors;
    let n = a.dim();
    let mut scaled = v.clone();
    for (j, r) in roots.iter().enumerate() {
        scaled.column_mut(j).scale_mut(*r);
    }
    let s = &scaled * v.transpose();
    debug_assert_eq!(s.nrows(), n);
    Ok(SymMatrix(symmetrize(s)))
}

fn jittered_cholesky(a: &SymMatrix, jitter: f64) -> Result<Cholesky<f64, Dyn>> {
    let n = a.dim();
    let m = a.matrix() + DMatrix::identity(n, n) * jitter;
    match Cholesky::new(m.clone()) {
        Some(c) if c.l_dirty().diagonal().iter().all(|d| *d > 0.0 && d.is_finite()) => Ok(c),
        _ => {
            let ev = SymMatrix(m).eigenvalues();
            Err(Error::NonPsd {
                min_eigenvalue: ev.first().copied().unwrap_or(f64::NAN),
            })
        }
    }
}

/// Inverse of `a + jitter·I`.
pub fn psd_inverse(a: &SymMatrix, jitter: f64) -> Result<SymMatrix> {
    let chol = jittered_cholesky(a, jitter)?;
    let inv = chol.inverse();
    if inv.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure("non-finite inverse".into()));
    }
    Ok(SymMatrix(symmetrize(inv)))
}

/// Inverse with the default relative jitter (`1e-6 × mean diagonal`).
pub fn psd_inverse_default(a: &SymMatrix) -> Result<SymMatrix> {
    psd_inverse(a, a.jitter_for(DEFAULT_JITTER))
}

/// `log |a + jitter·I|`.
pub fn log_det(a: &SymMatrix, jitter: f64) -> Result<f64> {
    let chol = jittered_cholesky(a, jitter)?;
    Ok(2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

pub fn normalize_trace(a: &SymMatrix) -> Result<SymMatrix> {
    let tr = a.trace();
    if !(tr > MIN_TRACE) {
        return Err(Error::DegenerateTrace { trace: tr });
    }
    Ok(SymMatrix(a.matrix() / tr))
}
