//! Dense numerical kernels: row-major matrices, thin Householder QR,
//! cyclic Jacobi symmetric eigensolver, and regularized/pseudoinverse solves.
//!
//! Everything here is deterministic 64-bit arithmetic with fixed traversal
//! order, so identical inputs give bit-identical outputs on one platform.

mod eig;
mod matrix;
mod qr;
mod solve;

pub use eig::{sym_eig, EigenDecomposition, JACOBI_MAX_SWEEPS};
pub use matrix::Matrix;
pub use qr::{qr_thin, QrThin};
pub use solve::{pinv_apply, solve_regularized};

use crate::error::{Error, Result};

/// Relative eigenvalue cutoff for pseudoinverse paths.
pub const PINV_CUTOFF: f64 = 1e-10;

/// Eigenvalues of a PSD matrix in `[-1e-10 * lambda_max, 0)` are rounding
/// noise; clamp them to zero in place.
pub fn clamp_psd(values: &mut [f64]) {
    let max = values.iter().cloned().fold(0.0_f64, f64::max);
    let floor = -PINV_CUTOFF * max;
    for v in values.iter_mut() {
        if *v < 0.0 && *v >= floor {
            *v = 0.0;
        }
    }
}

pub(crate) fn check_finite(data: &[f64], what: &'static str) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

pub mod vec_ops {
    //! Small helpers over `&[f64]` used throughout the crate.

    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    pub fn norm2(a: &[f64]) -> f64 {
        dot(a, a).sqrt()
    }

    /// y += alpha * x
    pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), y.len());
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi += alpha * xi;
        }
    }

    pub fn scale(alpha: f64, x: &mut [f64]) {
        for xi in x.iter_mut() {
            *xi *= alpha;
        }
    }

    pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
        debug_assert_eq!(a.len(), b.len());
        a.iter().zip(b).map(|(x, y)| x - y).collect()
    }

    pub fn dist(a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamp_psd_only_touches_noise() {
        let mut v = vec![3.0, 1e-13, -1e-12, -1.0];
        clamp_psd(&mut v);
        assert_eq!(v, vec![3.0, 1e-13, 0.0, -1.0]);
    }
}
