use super::{check_finite, sym_eig, vec_ops, Matrix, PINV_CUTOFF};
use crate::error::{Error, Result};

/// Cholesky factor L of a positive definite matrix, or None when a pivot
/// drops below `tol_rel * max_diag` (treated as numerically singular).
fn cholesky(a: &Matrix, tol_rel: f64) -> Option<Matrix> {
    let n = a.rows();
    let max_diag = (0..n).fold(0.0_f64, |m, i| m.max(a.get(i, i).abs()));
    let floor = tol_rel * max_diag.max(f64::MIN_POSITIVE);
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if s <= floor {
                    return None;
                }
                l.set(i, j, s.sqrt());
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    Some(l)
}

fn cholesky_solve(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l.get(i, k) * y[k];
        }
        y[i] = s / l.get(i, i);
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l.get(k, i) * x[k];
        }
        x[i] = s / l.get(i, i);
    }
    x
}

/// Apply the Moore-Penrose pseudoinverse of a symmetric PSD matrix to `b`,
/// dropping eigenvalues below `PINV_CUTOFF * lambda_max`.
pub fn pinv_apply(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let e = sym_eig(a)?;
    let lmax = e.values.iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
    let cutoff = PINV_CUTOFF * lmax;
    // x = V diag(1/lambda_kept) V^T b
    let vt_b = e.vectors.matvec_t(b);
    let mut x = vec![0.0; b.len()];
    for (k, &lam) in e.values.iter().enumerate() {
        if lam.abs() > cutoff {
            let col = e.vectors.col(k);
            vec_ops::axpy(vt_b[k] / lam, &col, &mut x);
        }
    }
    Ok(x)
}

/// Solve `(A + beta I) x = b` for symmetric PSD `A`.
///
/// `beta > 0` takes a Cholesky path (the shifted matrix is positive
/// definite). `beta = 0` returns the minimum-norm solution `A^+ b` and
/// errors if `b` has a component off `range(A)` beyond `1e-8 * ||b||`.
pub fn solve_regularized(a: &Matrix, beta: f64, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows();
    if a.cols() != n || b.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "solve_regularized: A is {}x{}, b has length {}",
            a.rows(),
            a.cols(),
            b.len()
        )));
    }
    if beta < 0.0 {
        return Err(Error::InvalidArgument("beta must be >= 0".into()));
    }
    check_finite(a.data(), "solve_regularized matrix")?;
    check_finite(b, "solve_regularized rhs")?;

    if beta > 0.0 {
        let mut shifted = a.clone();
        shifted.symmetrize();
        shifted.add_scaled_identity(beta);
        if let Some(l) = cholesky(&shifted, 1e-14) {
            return Ok(cholesky_solve(&l, b));
        }
        // Shifted matrix should be PD; an eigen fallback still honors the
        // contract if rounding defeated the factorization.
        return pinv_apply(&shifted, b);
    }

    // beta = 0: fast path for positive definite A (tolerating heavy
    // ill-conditioning; the factorization only breaks on true
    // singularity), else min-norm pseudoinverse with a range check.
    if let Some(l) = cholesky(a, 1e-15) {
        return Ok(cholesky_solve(&l, b));
    }
    let x = pinv_apply(a, b)?;
    let residual = {
        let ax = a.matvec(&x);
        vec_ops::dist(&ax, b)
    };
    let tol = 1e-8 * vec_ops::norm2(b);
    if residual > tol {
        return Err(Error::InconsistentSystem { residual, tol });
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_beta_zero() {
        let a = Matrix::identity(2);
        let x = solve_regularized(&a, 0.0, &[1.0, 2.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14);
        assert!((x[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn pure_regularizer() {
        let a = Matrix::zeros(1, 1);
        let x = solve_regularized(&a, 2.0, &[4.0]).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn spd_8x8_matches_dense_inverse_oracle() {
        // A = B^T B + I from a fixed B keeps this deterministic.
        let b = Matrix::from_vec(
            8,
            8,
            vec![
                0.6, -0.1, 0.3, 0.9, -0.5, 0.2, 0.1, -0.7, 0.4, 1.1, -0.2, 0.05, 0.3, -0.6, 0.8,
                0.2, -0.3, 0.5, 0.7, -0.4, 0.1, 0.9, -0.2, 0.6, 0.2, -0.8, 0.4, 0.3, 1.2, -0.1,
                0.5, -0.4, 0.7, 0.2, -0.6, 0.8, -0.3, 0.4, 0.1, 0.9, -0.5, 0.3, 0.9, -0.2, 0.6,
                0.7, -0.4, 0.1, 0.1, 0.6, -0.4, 0.5, 0.2, -0.3, 1.0, 0.8, 0.8, -0.2, 0.1, 0.6,
                -0.7, 0.5, 0.3, 0.2,
            ],
        )
        .unwrap();
        let mut a = b.matmul_tn(&b);
        a.add_scaled_identity(1.0);
        let rhs = vec![1.0, -2.0, 0.5, 3.0, -1.0, 0.25, 2.0, -0.75];
        let x = solve_regularized(&a, 0.1, &rhs).unwrap();

        // Oracle: Gauss-Jordan inverse of (A + 0.1 I), written independently.
        let n = 8;
        let mut shifted = a.clone();
        shifted.add_scaled_identity(0.1);
        let mut aug = Matrix::zeros(n, 2 * n);
        for i in 0..n {
            for j in 0..n {
                aug.set(i, j, shifted.get(i, j));
            }
            aug.set(i, n + i, 1.0);
        }
        for col in 0..n {
            let mut piv = col;
            for r in (col + 1)..n {
                if aug.get(r, col).abs() > aug.get(piv, col).abs() {
                    piv = r;
                }
            }
            if piv != col {
                for j in 0..2 * n {
                    let tmp = aug.get(col, j);
                    aug.set(col, j, aug.get(piv, j));
                    aug.set(piv, j, tmp);
                }
            }
            let d = aug.get(col, col);
            for j in 0..2 * n {
                let v = aug.get(col, j) / d;
                aug.set(col, j, v);
            }
            for r in 0..n {
                if r != col {
                    let f = aug.get(r, col);
                    if f != 0.0 {
                        for j in 0..2 * n {
                            let v = aug.get(r, j) - f * aug.get(col, j);
                            aug.set(r, j, v);
                        }
                    }
                }
            }
        }
        let mut expected = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                expected[i] += aug.get(i, n + j) * rhs[j];
            }
        }
        for i in 0..n {
            assert!(
                (x[i] - expected[i]).abs() < 1e-10,
                "component {i}: {} vs oracle {}",
                x[i],
                expected[i]
            );
        }
    }

    #[test]
    fn beta_zero_off_range_errors() {
        // A projects onto e_0; b has an e_1 component.
        let a = Matrix::from_diag(&[1.0, 0.0]);
        let err = solve_regularized(&a, 0.0, &[1.0, 1.0]);
        assert!(matches!(err, Err(Error::InconsistentSystem { .. })));
    }

    #[test]
    fn beta_zero_min_norm_on_singular() {
        let a = Matrix::from_diag(&[2.0, 0.0]);
        let x = solve_regularized(&a, 0.0, &[4.0, 0.0]).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-12);
        assert!(x[1].abs() < 1e-12);
    }
}
