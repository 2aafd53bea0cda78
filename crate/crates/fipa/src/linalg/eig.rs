use super::{check_finite, Matrix};
use crate::error::{Error, Result};

/// Sweep cap for the cyclic Jacobi iteration; hitting it is an error rather
/// than an endless loop.
pub const JACOBI_MAX_SWEEPS: usize = 100;

/// Symmetric eigendecomposition `A = V diag(values) V^T` with eigenvalues
/// sorted non-increasing and orthonormal eigenvector columns.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl EigenDecomposition {
    /// Rebuild `V diag(values) V^T`; used by oracle tests and the dense
    /// pseudoinverse.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.values.len();
        let mut out = Matrix::zeros(n, n);
        for k in 0..n {
            let col = self.vectors.col(k);
            out.rank_one_update(self.values[k], &col, &col);
        }
        out
    }
}

/// Cyclic Jacobi eigensolver for symmetric matrices.
///
/// Adequate (and exactly reproducible) for the dense sizes used here: the
/// reduced Rayleigh-Ritz blocks are tiny and the oracle-path matrices stay
/// in the low hundreds.
pub fn sym_eig(a: &Matrix) -> Result<EigenDecomposition> {
    let n = a.rows();
    if n != a.cols() {
        return Err(Error::DimensionMismatch(format!(
            "sym_eig needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    check_finite(a.data(), "sym_eig input")?;
    let scale = a.max_abs().max(1.0);
    let asym = a.max_asymmetry();
    if asym > 1e-12 * scale {
        return Err(Error::NotSymmetric(asym));
    }

    if n == 0 {
        return Ok(EigenDecomposition {
            values: vec![],
            vectors: Matrix::zeros(0, 0),
        });
    }

    let mut m = a.clone();
    m.symmetrize();
    let mut v = Matrix::identity(n);

    let off = |m: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += m.get(i, j) * m.get(i, j);
            }
        }
        (2.0 * s).sqrt()
    };

    let frob = m.frobenius_norm().max(f64::MIN_POSITIVE);
    let tol = 1e-15 * frob;

    let mut converged = false;
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        if off(&m) <= tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                // Classic stable rotation computation.
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                // Update rows/cols p and q of M.
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                // Accumulate the rotation into V.
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    if !converged && off(&m) > tol {
        return Err(Error::EigenNoConvergence(JACOBI_MAX_SWEEPS));
    }

    // Sort descending by eigenvalue; ties keep original column order.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        m.get(j, j)
            .partial_cmp(&m.get(i, i))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values: Vec<f64> = order.iter().map(|&i| m.get(i, i)).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let col = v.col(src);
        vectors.set_col(dst, &col);
    }

    Ok(EigenDecomposition { values, vectors })
}
