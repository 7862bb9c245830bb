//! The small amount of dense linear algebra the model needs: Cholesky
//! factorization with jitter repair, triangular solves and log-determinants.
//!
//! The factor is kept in a flat row-major buffer so the sampler's inner loop
//! can apply it without allocating.

use nalgebra::DMatrix;

use crate::{Error, Result};

/// Largest asymmetry tolerated before a matrix is rejected as non-symmetric.
pub const SYMMETRY_TOL: f64 = 1e-10;

const JITTER_START: f64 = 1e-8;
const JITTER_MAX: f64 = 1e-2;

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = A`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    dim: usize,
    lower: Vec<f64>,
    inv_diag: Vec<f64>,
    half_log_det: f64,
}

impl Cholesky {
    /// Factors a symmetric matrix; `None` if it is not positive definite.
    pub fn new(a: &DMatrix<f64>) -> Option<Self> {
        let d = a.nrows();
        if d == 0 || a.ncols() != d {
            return None;
        }
        let mut l = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                let mut sum = a[(i, j)];
                for k in 0..j {
                    sum -= l[i * d + k] * l[j * d + k];
                }
                if i == j {
                    if !(sum > 0.0) || !sum.is_finite() {
                        return None;
                    }
                    l[i * d + i] = sum.sqrt();
                } else {
                    l[i * d + j] = sum / l[j * d + j];
                }
            }
        }
        let inv_diag: Vec<f64> = (0..d).map(|i| 1.0 / l[i * d + i]).collect();
        let half_log_det = (0..d).map(|i| l[i * d + i].ln()).sum();
        Some(Self { dim: d, lower: l, inv_diag, half_log_det })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.lower[i * self.dim + j]
    }

    /// Solves `L x = b` in place.
    #[inline]
    pub fn solve_lower(&self, b: &mut [f64]) {
        let d = self.dim;
        for i in 0..d {
            let row = &self.lower[i * d..i * d + i];
            let s: f64 = row.iter().zip(&b[..i]).map(|(l, x)| l * x).sum();
            b[i] = (b[i] - s) * self.inv_diag[i];
        }
    }

    /// Solves `Lᵀ x = b` in place.
    #[inline]
    pub fn solve_upper(&self, b: &mut [f64]) {
        let d = self.dim;
        for i in (0..d).rev() {
            let mut s = b[i];
            for k in i + 1..d {
                s -= self.lower[k * d + i] * b[k];
            }
            b[i] = s * self.inv_diag[i];
        }
    }

    /// Solves `A x = b` in place.
    #[inline]
    pub fn solve(&self, b: &mut [f64]) {
        self.solve_lower(b);
        self.solve_upper(b);
    }

    /// Sum of the logs of the factor's diagonal, i.e. `½ log|A|`.
    #[inline]
    pub fn half_log_det(&self) -> f64 {
        self.half_log_det
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.half_log_det()
    }

    /// `A⁻¹` as a row-major buffer.
    pub fn inverse_row_major(&self) -> Vec<f64> {
        let d = self.dim;
        let mut inv = vec![0.0; d * d];
        let mut e = vec![0.0; d];
        for j in 0..d {
            e.fill(0.0);
            e[j] = 1.0;
            self.solve(&mut e);
            for i in 0..d {
                inv[i * d + j] = e[i];
            }
        }
        // symmetric by construction; average out rounding
        for i in 0..d {
            for j in 0..i {
                let v = 0.5 * (inv[i * d + j] + inv[j * d + i]);
                inv[i * d + j] = v;
                inv[j * d + i] = v;
            }
        }
        inv
    }

    /// Computes `L z` into `out`.
    pub fn mul_lower(&self, z: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for i in 0..d {
            out[i] = (0..=i).map(|k| self.lower[i * d + k] * z[k]).sum();
        }
    }

    pub fn lower_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.lower)
    }

    /// `L Lᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let l = self.lower_matrix();
        &l * l.transpose()
    }
}

pub fn is_symmetric(a: &DMatrix<f64>, tol: f64) -> bool {
    a.is_square() && (0..a.nrows()).all(|i| (0..i).all(|j| (a[(i, j)] - a[(j, i)]).abs() <= tol))
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Outcome of [`factor_with_jitter`].
#[derive(Debug, Clone)]
pub struct Repaired {
    pub matrix: DMatrix<f64>,
    pub factor: Cholesky,
    /// Absolute amount added to the diagonal (0 when none was needed).
    pub jitter: f64,
}

/// Symmetrizes `a` and factors it, adding diagonal jitter of
/// `1e-8 * mean(diag)` escalating by 10x up to `1e-2 * mean(diag)` when the
/// plain factorization fails.
pub fn factor_with_jitter(a: &DMatrix<f64>) -> Result<Repaired> {
    if !a.is_square() || a.nrows() == 0 {
        return Err(Error::InvalidArgument("covariance must be square and non-empty".into()));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("covariance entry".into()));
    }
    let sym = symmetrize(a);
    if let Some(factor) = Cholesky::new(&sym) {
        return Ok(Repaired { matrix: sym, factor, jitter: 0.0 });
    }
    let d = sym.nrows();
    let mean_diag = sym.diagonal().iter().sum::<f64>() / d as f64;
    if !(mean_diag > 0.0) {
        return Err(Error::NotPositiveDefinite);
    }
    let mut scale = JITTER_START;
    while scale <= JITTER_MAX * (1.0 + 1e-12) {
        let jitter = scale * mean_diag;
        let mut m = sym.clone();
        for i in 0..d {
            m[(i, i)] += jitter;
        }
        if let Some(factor) = Cholesky::new(&m) {
            return Ok(Repaired { matrix: m, factor, jitter });
        }
        scale *= 10.0;
    }
    Err(Error::NotPositiveDefinite)
}
