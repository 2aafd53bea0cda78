use super::{check_finite, Matrix};
use crate::error::{Error, Result};

/// Thin QR factorization `V = Q R` with `Q` of size p x n and `R` upper
/// triangular n x n.
#[derive(Debug, Clone)]
pub struct QrThin {
    pub q: Matrix,
    pub r: Matrix,
}

impl QrThin {
    /// Count of diagonal entries of R above `tol * max |r_jj|`; a value
    /// below `n` signals rank deficiency, which is allowed and left to the
    /// caller to act on.
    pub fn rank_estimate(&self, tol: f64) -> usize {
        let n = self.r.cols();
        let max = (0..n).fold(0.0_f64, |m, j| m.max(self.r.get(j, j).abs()));
        if max == 0.0 {
            return 0;
        }
        (0..n).filter(|&j| self.r.get(j, j).abs() > tol * max).count()
    }
}

/// Householder thin QR of a p x n matrix with p >= n.
///
/// The sign convention forces a non-negative diagonal of R, which makes the
/// factorization unique (hence reproducible) for full-rank input. Zero or
/// rank-deficient columns are tolerated: R just picks up (near-)zero
/// diagonal entries while Q stays orthonormal.
pub fn qr_thin(v: &Matrix) -> Result<QrThin> {
    let p = v.rows();
    let n = v.cols();
    if p < n {
        return Err(Error::DimensionMismatch(format!(
            "thin QR needs p >= n, got {p}x{n}"
        )));
    }
    check_finite(v.data(), "qr_thin input")?;

    // Work array starts as a copy of V; reflectors overwrite its lower part.
    let mut a = v.clone();
    // Householder vectors, one per column (stored dense for the Q build-up).
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);

    for j in 0..n {
        // Norm of the j-th column below the diagonal.
        let mut norm = 0.0;
        for i in j..p {
            norm += a.get(i, j) * a.get(i, j);
        }
        norm = norm.sqrt();

        let mut h = vec![0.0; p];
        if norm > 0.0 {
            let a_jj = a.get(j, j);
            let alpha = if a_jj >= 0.0 { -norm } else { norm };
            // h = x - alpha * e_j, normalized
            let mut hnorm2 = 0.0;
            for i in j..p {
                let hi = if i == j { a.get(i, j) - alpha } else { a.get(i, j) };
                h[i] = hi;
                hnorm2 += hi * hi;
            }
            if hnorm2 > 0.0 {
                let inv = 1.0 / hnorm2.sqrt();
                for hi in h.iter_mut().skip(j) {
                    *hi *= inv;
                }
                // Apply the reflector to the remaining columns of A.
                for k in j..n {
                    let mut s = 0.0;
                    for i in j..p {
                        s += h[i] * a.get(i, k);
                    }
                    s *= 2.0;
                    for i in j..p {
                        let v = a.get(i, k) - s * h[i];
                        a.set(i, k, v);
                    }
                }
            }
        }
        reflectors.push(h);
    }

    // R is the upper triangle of the transformed A.
    let mut r = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            r.set(i, j, a.get(i, j));
        }
    }

    // Q = H_0 ... H_{n-1} applied to the first n identity columns, built by
    // running the reflectors backwards over I.
    let mut q = Matrix::zeros(p, n);
    for j in 0..n {
        q.set(j, j, 1.0);
    }
    for j in (0..n).rev() {
        let h = &reflectors[j];
        for k in 0..n {
            let mut s = 0.0;
            for i in j..p {
                s += h[i] * q.get(i, k);
            }
            s *= 2.0;
            if s != 0.0 {
                for i in j..p {
                    let v = q.get(i, k) - s * h[i];
                    q.set(i, k, v);
                }
            }
        }
    }

    // Flip signs so diag(R) >= 0.
    for j in 0..n {
        if r.get(j, j) < 0.0 {
            for k in j..n {
                let v = -r.get(j, k);
                r.set(j, k, v);
            }
            for i in 0..p {
                let v = -q.get(i, j);
                q.set(i, j, v);
            }
        }
    }

    Ok(QrThin { q, r })
}
