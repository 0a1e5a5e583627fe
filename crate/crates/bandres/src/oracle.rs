//! Brute-force reference computations on the truncated Hamiltonian.
//!
//! Everything here works directly with the stencil of
//! `H = Δ ⊗ I + I ⊗ M` on a Dirichlet box `[−L, L]`, with no use of the
//! closed-form kernels: resolvent columns come from a block-tridiagonal
//! elimination, eigenvalues from a dense eigensolve.  This is the independent
//! side of every continuation and eigenvalue cross-check.

use crate::freeres::WeightScheme;
use crate::linalg::{self, LinalgError};
use crate::{c64, C64};
use ndarray::{Array1, Array2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("site {0} outside the box")]
    SiteOutsideBox(i64),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// `H = Δ ⊗ I + I ⊗ M` truncated to sites `[−L, L]` with Dirichlet ends.
pub struct BoxedHamiltonian {
    m: Array2<C64>,
    box_l: i64,
}

impl BoxedHamiltonian {
    pub fn new(m: &Array2<C64>, box_l: i64) -> Self {
        Self {
            m: m.clone(),
            box_l,
        }
    }

    /// Scalar lattice Laplacian (`𝔊 = ℂ`, `M = 0`).
    pub fn free_laplacian(box_l: i64) -> Self {
        Self::new(&Array2::zeros((1, 1)), box_l)
    }

    pub fn gdim(&self) -> usize {
        self.m.nrows()
    }

    pub fn n_sites(&self) -> usize {
        (2 * self.box_l + 1) as usize
    }

    pub fn dim(&self) -> usize {
        self.n_sites() * self.gdim()
    }

    /// Row index of lattice site `n`, channel component `g`.
    pub fn flat_index(&self, n: i64, g: usize) -> usize {
        ((n + self.box_l) as usize) * self.gdim() + g
    }

    /// Dense matrix of `H` (for eigensolves and small-box checks).
    pub fn matrix(&self) -> Array2<C64> {
        let g = self.gdim();
        let ns = self.n_sites();
        let n = self.dim();
        let mut h = Array2::<C64>::zeros((n, n));
        for i in 0..ns {
            for g1 in 0..g {
                for g2 in 0..g {
                    h[[i * g + g1, i * g + g2]] += self.m[[g1, g2]];
                }
                h[[i * g + g1, i * g + g1]] += 2.0;
                if i + 1 < ns {
                    h[[i * g + g1, (i + 1) * g + g1]] -= 1.0;
                    h[[(i + 1) * g + g1, i * g + g1]] -= 1.0;
                }
            }
        }
        h
    }

    /// Adds `v` (a dense matrix in the same flattened indexing) to `H` and
    /// returns the eigenvalues of the sum, using the Hermitian solver when
    /// the result is Hermitian up to round-off.
    pub fn perturbed_eigenvalues(&self, v: &Array2<C64>) -> Result<Vec<C64>, OracleError> {
        let h = self.matrix() + v;
        let eigs: Vec<C64> =
            if linalg::hermitian_defect(&h) < 1e-12 * linalg::max_abs(&h).max(1.0) {
                let (vals, _) = linalg::eigh(&h)?;
                vals.iter().map(|&x| c64(x, 0.0)).collect()
            } else {
                let (vals, _) = linalg::eig(&h)?;
                vals.to_vec()
            };
        let mut eigs = eigs;
        eigs.sort_by(|a, b| (a.re, a.im).partial_cmp(&(b.re, b.im)).unwrap());
        Ok(eigs)
    }

    pub fn eigenvalues(&self) -> Result<Vec<C64>, OracleError> {
        self.perturbed_eigenvalues(&Array2::zeros((self.dim(), self.dim())))
    }

    /// Columns of `(H − z)⁻¹` at the unit vectors `δ_m ⊗ e_g` for every site
    /// `m` in `cols` and every channel `g`, via block-tridiagonal
    /// elimination.  Output shape `(dim, cols.len() · gdim)`.
    pub fn resolvent_columns(&self, z: C64, cols: &[i64]) -> Result<Array2<C64>, OracleError> {
        let g = self.gdim();
        let ns = self.n_sites();
        for &m in cols {
            if m.abs() > self.box_l {
                return Err(OracleError::SiteOutsideBox(m));
            }
        }
        // diagonal block D = (2 − z) I + M, off-diagonal blocks −I
        let mut d = self.m.clone();
        for i in 0..g {
            d[[i, i]] += 2.0 - z;
        }
        // forward sweep: U_1 = D, U_i = D − U_{i−1}⁻¹; store the inverses
        let mut inv_u: Vec<Array2<C64>> = Vec::with_capacity(ns);
        let mut u = d.clone();
        inv_u.push(linalg::inv(&u)?);
        for _ in 1..ns {
            u = &d - inv_u.last().unwrap();
            inv_u.push(linalg::inv(&u)?);
        }

        let ncols = cols.len() * g;
        let mut out = Array2::<C64>::zeros((self.dim(), ncols));
        let mut y: Vec<Array1<C64>> = vec![Array1::zeros(g); ns];
        for (ci, &msite) in cols.iter().enumerate() {
            let mi = (msite + self.box_l) as usize;
            for gc in 0..g {
                for yi in y.iter_mut() {
                    yi.fill(c64(0.0, 0.0));
                }
                // forward substitution: y_i = b_i + U_{i−1}⁻¹ y_{i−1}
                for i in 0..ns {
                    let mut b = Array1::<C64>::zeros(g);
                    if i == mi {
                        b[gc] = c64(1.0, 0.0);
                    }
                    if i > 0 {
                        let prev = inv_u[i - 1].dot(&y[i - 1]);
                        b = b + prev;
                    }
                    y[i] = b;
                }
                // back substitution: x_N = U_N⁻¹ y_N, x_i = U_i⁻¹ (y_i + x_{i+1})
                let mut x_next = inv_u[ns - 1].dot(&y[ns - 1]);
                for gr in 0..g {
                    out[[(ns - 1) * g + gr, ci * g + gc]] = x_next[gr];
                }
                for i in (0..ns - 1).rev() {
                    let rhs = &y[i] + &x_next;
                    x_next = inv_u[i].dot(&rhs);
                    for gr in 0..g {
                        out[[i * g + gr, ci * g + gc]] = x_next[gr];
                    }
                }
            }
        }
        Ok(out)
    }

    /// `W (H − z)⁻¹ W` restricted to the site blocks `rows × cols`.
    pub fn weighted_resolvent_block(
        &self,
        z: C64,
        w: &WeightScheme,
        rows: &[i64],
        cols: &[i64],
    ) -> Result<Array2<C64>, OracleError> {
        let g = self.gdim();
        let sol = self.resolvent_columns(z, cols)?;
        let mut out = Array2::<C64>::zeros((rows.len() * g, cols.len() * g));
        for (ri, &n) in rows.iter().enumerate() {
            if n.abs() > self.box_l {
                return Err(OracleError::SiteOutsideBox(n));
            }
            let wn = w.w_minus(n);
            for gr in 0..g {
                let src = self.flat_index(n, gr);
                for (ci, &m) in cols.iter().enumerate() {
                    let wm = w.w_minus(m);
                    for gc in 0..g {
                        out[[ri * g + gr, ci * g + gc]] = sol[[src, ci * g + gc]] * wn * wm;
                    }
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs;
    use crate::model::ChannelMatrix;

    #[test]
    fn block_solve_matches_dense_inverse() {
        let m = ChannelMatrix::strip(2).unwrap();
        let ham = BoxedHamiltonian::new(&m.entries, 6);
        let z = c64(0.3, 0.8);
        let cols = [0i64, -2, 5];
        let sol = ham.resolvent_columns(z, &cols).unwrap();
        let mut hz = ham.matrix();
        for i in 0..ham.dim() {
            hz[[i, i]] -= z;
        }
        let inv = crate::linalg::inv(&hz).unwrap();
        for (ci, &msite) in cols.iter().enumerate() {
            for gc in 0..2 {
                for r in 0..ham.dim() {
                    let want = inv[[r, ham.flat_index(msite, gc)]];
                    let got = sol[[r, ci * 2 + gc]];
                    assert!((got - want).norm() < 1e-11);
                }
            }
        }
    }

    #[test]
    fn strip_box_eigenvalues_inside_bands() {
        let m = ChannelMatrix::strip(2).unwrap();
        let ham = BoxedHamiltonian::new(&m.entries, 30);
        let eigs = ham.eigenvalues().unwrap();
        // H is Hermitian: all eigenvalues real, inside [1, 7] = [λ1, λ2+4]
        for e in eigs {
            assert!(e.im.abs() < 1e-10);
            assert!(e.re > 1.0 - 1e-9 && e.re < 7.0 + 1e-9);
        }
    }

    #[test]
    fn weighted_block_is_symmetric_for_real_z() {
        let m = ChannelMatrix::strip(2).unwrap();
        let ham = BoxedHamiltonian::new(&m.entries, 8);
        let w = WeightScheme::new(1.0, 8).unwrap();
        let sites = w.sites();
        let b = ham
            .weighted_resolvent_block(c64(-1.0, 0.0), &w, &sites, &sites)
            .unwrap();
        let bt = b.t().to_owned();
        assert!(max_abs(&(&b - &bt)) < 1e-10);
    }
}
