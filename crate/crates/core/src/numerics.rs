//! Dense SPD kernels: Cholesky factorization, inversion, and masked
//! least-squares solves.
//!
//! Dampening is the caller's responsibility; a non-positive pivot is
//! reported as [`Error::NotPositiveDefinite`] rather than regularized
//! away.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{DenseMatrix, Error, Result};

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct PsdFactor {
    dim: usize,
    lower: DenseMatrix,
}

impl PsdFactor {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lower_triangular(&self) -> &DenseMatrix {
        &self.lower
    }

    /// Solves L·Lᵀ·x = b.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.dim {
            return Err(Error::DimensionMismatch {
                context: format!("solve dim {} vs rhs len {}", self.dim, b.len()),
            });
        }
        let n = self.dim;
        let l = &self.lower;
        // Forward: L y = b
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= l.get(i, k) * y[k];
            }
            y[i] = s / l.get(i, i);
        }
        // Back: Lᵀ x = y
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l.get(k, i) * x[k];
            }
            x[i] = s / l.get(i, i);
        }
        Ok(x)
    }
}

/// Factors a symmetric positive-definite matrix as L·Lᵀ.
pub fn cholesky(a: &DenseMatrix) -> Result<PsdFactor> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::DimensionMismatch {
            context: format!("cholesky of {}x{}", a.rows(), a.cols()),
        });
    }
    let mut l = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(Error::NotPositiveDefinite { pivot_index: i });
                }
                l.set(i, j, libm::sqrt(s));
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    Ok(PsdFactor { dim: n, lower: l })
}

/// Inverse of a symmetric positive-definite matrix via its Cholesky factor.
pub fn psd_inverse(a: &DenseMatrix) -> Result<DenseMatrix> {
    let f = cholesky(a)?;
    let n = f.dim();
    let mut inv = DenseMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for c in 0..n {
        e[c] = 1.0;
        let col = f.solve(&e)?;
        e[c] = 0.0;
        for r in 0..n {
            inv.set(r, c, col[r]);
        }
    }
    // Symmetrize to kill the asymmetry left by columnwise solves.
    for r in 0..n {
        for c in (r + 1)..n {
            let v = 0.5 * (inv.get(r, c) + inv.get(c, r));
            inv.set(r, c, v);
            inv.set(c, r, v);
        }
    }
    Ok(inv)
}

/// Solves min_w ||wᵀ·x_masked − target||² via the normal equations
/// (X Xᵀ) w = X tᵀ, where `x_masked` is k×N (one row per surviving
/// feature, one column per calibration sample).
pub fn masked_least_squares(x_masked: &DenseMatrix, target: &[f64]) -> Result<Vec<f64>> {
    let k = x_masked.rows();
    let n = x_masked.cols();
    if target.len() != n {
        return Err(Error::DimensionMismatch {
            context: format!("target len {} vs {} calibration columns", target.len(), n),
        });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    // Gram matrix X Xᵀ (k×k).
    let mut gram = DenseMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..=i {
            let s: f64 = x_masked
                .row(i)
                .iter()
                .zip(x_masked.row(j))
                .map(|(a, b)| a * b)
                .sum();
            gram.set(i, j, s);
            gram.set(j, i, s);
        }
    }
    let rhs: Vec<f64> = (0..k)
        .map(|i| x_masked.row(i).iter().zip(target).map(|(a, b)| a * b).sum())
        .collect();
    cholesky(&gram)?.solve(&rhs)
}
