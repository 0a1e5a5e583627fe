//! Resonances of multichannel discrete Schrödinger operators near band edges.
//!
//! The unperturbed Hamiltonian is `H0 = Δ ⊗ I + I ⊗ M` acting on
//! `ℓ²(ℤ) ⊗ 𝔊`, where `Δ` is the 1D discrete Laplacian
//! `(Δu)(n) = 2u(n) − u(n+1) − u(n−1)` with spectrum `[0, 4]`, and `M` is a
//! channel operator on a (truncated) space `𝔊`.  The spectrum of `H0` is the
//! union of bands `[λ_q, λ_q + 4]` over the eigenvalues `λ_q` of `M`; the band
//! edges act as thresholds.  For a compact perturbation `H_ω = H0 + ωV` this
//! crate locates the resonances `z_q(k) = λ_q + k²` near a threshold as poles
//! of the analytically continued weighted resolvent, counts them with
//! multiplicities via contour indices and residue ranks, and verifies the
//! cluster and accumulation laws that govern their distribution for small
//! `|ω|`.
//!
//! Module map:
//!
//! * [`model`] — channel operators, spectral data, threshold taxonomy, presets
//! * [`freeres`] — lattice Green function, analytic continuation, weighted
//!   free resolvent and its singular split
//! * [`perturbation`] — potentials, weighted sandwiches, Birman–Schwinger
//!   families
//! * [`charval`] — characteristic-value engine: contour indices, zero
//!   location, residue ranks
//! * [`clusters`] — effective matrices and the cluster law near a threshold
//! * [`accumulation`] — counting and sector laws for the infinite-dimensional
//!   channel case near the threshold 0
//! * [`oracle`] — brute-force reference computations (direct solves and
//!   eigensolves of the truncated Hamiltonian) used for cross-checks

extern crate blas_src;
extern crate openblas_src;

pub mod accumulation;
pub mod charval;
pub mod clusters;
pub mod freeres;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod perturbation;

/// Complex scalar used throughout.
pub type C64 = num_complex::Complex64;

/// Shorthand for `C64::new`.
#[inline]
pub fn c64(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// Imaginary unit.
pub const I: C64 = C64 { re: 0.0, im: 1.0 };

/// Default tolerances, named after the role they play.
pub mod tol {
    /// Clustering tolerance when grouping numerically split eigenvalues.
    pub const EIG_CLUSTER: f64 = 1e-9;
    /// Entrywise tolerance for projection identities (idempotence etc.).
    pub const PROJECTION: f64 = 1e-10;
    /// Threshold coincidence tolerance (degeneracy detection).
    pub const THRESHOLD_EQ: f64 = 1e-12;
    /// Eigenvector-matrix condition number beyond which `M` is treated as
    /// non-diagonalizable.
    pub const DIAG_COND: f64 = 1e10;
    /// Distance to `[0, 4]` below which a spectral parameter is rejected.
    pub const ON_SPECTRUM: f64 = 1e-14;
    /// Default cap on the continuation disk radius.
    pub const EPS0_CAP: f64 = 0.3;
    /// Convergence target for adaptive contour quadrature.
    pub const CONTOUR_QUAD: f64 = 1e-8;
    /// Maximal distance of an accepted index from an integer.
    pub const INDEX_SNAP: f64 = 1e-6;
    /// Smallest singular value allowed on a contour.
    pub const CONTOUR_GUARD: f64 = 1e-10;
    /// Relative singular-value cutoff for residue ranks.
    pub const RANK_CUT: f64 = 1e-8;
    /// Factor around the rank cutoff flagged as ambiguous.
    pub const RANK_AMBIG: f64 = 10.0;
    /// Condition-number limit for the perturbed-resolvent solve.
    pub const AT_POLE_COND: f64 = 1e12;
    /// Site pairs with potential blocks below this bound are dropped.
    pub const PAIR_DROP: f64 = 1e-14;
    /// Numerical-range slack for sign-definiteness checks.
    pub const SIGN_DEFINITE: f64 = 1e-10;
    /// Relative clustering tolerance for effective-matrix eigenvalues.
    pub const ALPHA_CLUSTER: f64 = 1e-7;
    /// Punctured-disk exclusion radius around `k = 0`, relative to `ε₀`.
    pub const PUNCTURE_REL: f64 = 1e-4;
}
