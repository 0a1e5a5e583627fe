//! Thin helpers over `ndarray-linalg` for the dense complex kernels used
//! everywhere else: eigendecompositions, singular values, solves and a few
//! scalar utilities.

use crate::C64;
use ndarray::{Array1, Array2};
use ndarray_linalg::{Eig, Eigh, Inverse, Norm, SVD, UPLO};
use std::sync::LazyLock;
use thiserror::Error;

static BLAS_SERIAL: LazyLock<()> = LazyLock::new(|| {
    extern "C" {
        fn openblas_set_num_threads(n: std::os::raw::c_int);
    }
    // single-threaded BLAS: deterministic reductions, and the threaded
    // zgetrf recursion is too stack-hungry for test threads
    unsafe { openblas_set_num_threads(1) };
});

/// Pins the BLAS backend to one thread (idempotent).
pub fn ensure_blas_serial() {
    LazyLock::force(&BLAS_SERIAL);
}

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("LAPACK call failed: {0}")]
    Lapack(#[from] ndarray_linalg::error::LinalgError),
    #[error("matrix is numerically singular")]
    Singular,
    #[error("matrix is not Hermitian (deviation {dev:.3e})")]
    NotHermitian { dev: f64 },
}

/// Eigenvalues and right eigenvectors (columns) of a general complex matrix.
pub fn eig(a: &Array2<C64>) -> Result<(Array1<C64>, Array2<C64>), LinalgError> {
    ensure_blas_serial();
    Ok(a.eig()?)
}

/// Eigenvalues (ascending) and eigenvectors of a Hermitian matrix.
/// The caller is responsible for `a` being Hermitian up to round-off.
///
/// Depending on layout the LAPACK wrapper can hand back eigenvectors of the
/// transposed (= conjugated) matrix; we pick whichever of `v`, `conj(v)` has
/// the smaller residual.
pub fn eigh(a: &Array2<C64>) -> Result<(Array1<f64>, Array2<C64>), LinalgError> {
    ensure_blas_serial();
    let (vals, vecs) = a.eigh(UPLO::Lower)?;
    let vecs_conj = vecs.mapv(|z| z.conj());
    let resid = |v: &Array2<C64>| -> f64 {
        let av = a.dot(v);
        let mut worst = 0.0f64;
        for (i, &l) in vals.iter().enumerate() {
            for r in 0..a.nrows() {
                worst = worst.max((av[[r, i]] - v[[r, i]] * l).norm());
            }
        }
        worst
    };
    if resid(&vecs_conj) < resid(&vecs) {
        Ok((vals, vecs_conj))
    } else {
        Ok((vals, vecs))
    }
}

/// Singular values, descending.
pub fn svdvals(a: &Array2<C64>) -> Result<Array1<f64>, LinalgError> {
    ensure_blas_serial();
    let (_, s, _) = a.svd(false, false)?;
    Ok(s)
}

/// Full SVD `a = u · diag(s) · vt`.
pub fn svd_full(a: &Array2<C64>) -> Result<(Array2<C64>, Array1<f64>, Array2<C64>), LinalgError> {
    ensure_blas_serial();
    let (u, s, vt) = a.svd(true, true)?;
    Ok((u.expect("svd u"), s, vt.expect("svd vt")))
}

/// 2-norm condition number.
pub fn cond2(a: &Array2<C64>) -> Result<f64, LinalgError> {
    let s = svdvals(a)?;
    let max = s.iter().cloned().fold(0.0f64, f64::max);
    let min = s.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 || !min.is_finite() {
        return Ok(f64::INFINITY);
    }
    Ok(max / min)
}

/// Number of singular values above `rel` times the largest.
pub fn rank_rel(svals: &Array1<f64>, rel: f64) -> usize {
    let max = svals.iter().cloned().fold(0.0f64, f64::max);
    if max == 0.0 {
        return 0;
    }
    svals.iter().filter(|&&s| s > rel * max).count()
}

pub fn inv(a: &Array2<C64>) -> Result<Array2<C64>, LinalgError> {
    ensure_blas_serial();
    Ok(a.inv()?)
}

/// Solve `a · x = b` for a matrix right-hand side.
pub fn solve_matrix(a: &Array2<C64>, b: &Array2<C64>) -> Result<Array2<C64>, LinalgError> {
    ensure_blas_serial();
    Ok(a.inv()?.dot(b))
}

pub fn trace(a: &Array2<C64>) -> C64 {
    a.diag().sum()
}

pub fn fro_norm(a: &Array2<C64>) -> f64 {
    a.norm_l2()
}

/// Operator 2-norm (largest singular value).
pub fn opnorm2(a: &Array2<C64>) -> Result<f64, LinalgError> {
    let s = svdvals(a)?;
    Ok(s.iter().cloned().fold(0.0f64, f64::max))
}

pub fn max_abs(a: &Array2<C64>) -> f64 {
    a.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Deviation from Hermitian symmetry in max-abs norm.
pub fn hermitian_defect(a: &Array2<C64>) -> f64 {
    let mut dev = 0.0f64;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            dev = dev.max((a[[i, j]] - a[[j, i]].conj()).norm());
        }
    }
    dev
}

/// Hermitian square-root factor: returns `f` with `a = f · f†`, keeping only
/// eigendirections above `cut` relative to the largest eigenvalue.
/// Fails when `a` deviates from Hermitian or has eigenvalues below `-neg_tol`
/// (relative).
pub fn psd_sqrt_factor(
    a: &Array2<C64>,
    neg_tol: f64,
    cut: f64,
) -> Result<Array2<C64>, LinalgError> {
    let dev = hermitian_defect(a);
    let scale = max_abs(a).max(1e-300);
    if dev > 1e-10 * scale {
        return Err(LinalgError::NotHermitian { dev });
    }
    let sym = (a + &a.t().mapv(|z| z.conj())).mapv(|z| 0.5 * z);
    let (vals, vecs) = eigh(&sym)?;
    let vmax = vals.iter().cloned().fold(0.0f64, f64::max).max(1e-300);
    for &v in vals.iter() {
        if v < -neg_tol * vmax {
            return Err(LinalgError::Singular);
        }
    }
    let keep: Vec<usize> = (0..vals.len()).filter(|&i| vals[i] > cut * vmax).collect();
    let mut f = Array2::<C64>::zeros((a.nrows(), keep.len()));
    for (col, &i) in keep.iter().enumerate() {
        let s = vals[i].max(0.0).sqrt();
        for r in 0..a.nrows() {
            f[[r, col]] = vecs[[r, i]] * s;
        }
    }
    Ok(f)
}

/// `exp(z) − 1` without cancellation for small `|z|`.
pub fn cexpm1(z: C64) -> C64 {
    if z.norm() < 1e-4 {
        // five Taylor terms reach full double precision below 1e-4
        z * (C64::new(1.0, 0.0)
            + z * (C64::new(0.5, 0.0)
                + z * (C64::new(1.0 / 6.0, 0.0)
                    + z * (C64::new(1.0 / 24.0, 0.0) + z * C64::new(1.0 / 120.0, 0.0)))))
    } else {
        z.exp() - 1.0
    }
}

/// Distance from `z` to the real segment `[0, 4]`.
pub fn dist_to_band(z: C64) -> f64 {
    if z.re < 0.0 {
        z.norm()
    } else if z.re > 4.0 {
        (z - C64::new(4.0, 0.0)).norm()
    } else {
        z.im.abs()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::c64;
    use ndarray::array;

    #[test]
    fn expm1_matches_direct_for_moderate_argument() {
        let z = c64(0.3, -0.2);
        let d = (cexpm1(z) - (z.exp() - 1.0)).norm();
        assert!(d < 1e-15);
    }

    #[test]
    fn expm1_is_accurate_for_tiny_argument() {
        let z = c64(1e-9, 2e-9);
        let got = cexpm1(z);
        let expect = z + z * z / 2.0;
        assert!((got - expect).norm() < 1e-24);
    }

    #[test]
    fn band_distance() {
        assert!((dist_to_band(c64(-3.0, 4.0)) - 5.0).abs() < 1e-15);
        assert!((dist_to_band(c64(2.0, 0.25)) - 0.25).abs() < 1e-15);
        assert!((dist_to_band(c64(7.0, -4.0)) - 5.0).abs() < 1e-15);
    }

    #[test]
    fn psd_sqrt_factor_reconstructs() {
        let a = array![
            [c64(2.0, 0.0), c64(0.5, 0.5)],
            [c64(0.5, -0.5), c64(1.0, 0.0)]
        ];
        let f = psd_sqrt_factor(&a, 1e-10, 1e-14).unwrap();
        let back = f.dot(&f.t().mapv(|z| z.conj()));
        assert!(max_abs(&(&back - &a)) < 1e-12);
    }
}
