//! Lattice Green function of the 1D discrete Laplacian, its analytic
//! continuation in the local variable `k`, and the truncated weighted free
//! resolvent of `H0` near a threshold.
//!
//! For `z ∉ [0, 4]` the kernel of `(Δ − z)⁻¹` is
//! `e^{−iθ(z)|n−m|} / (2i sin θ(z))` where `θ(z)` solves `2 − 2cos θ = z`
//! with `Im θ < 0`.  Writing `ξ = e^{−iθ}` (the root of `ξ² − 2wξ + 1 = 0`,
//! `w = (2 − z)/2`, with `|ξ| < 1`) the kernel becomes
//! `ξ^{|n−m|+1} / (1 − ξ²)`, the form used throughout.
//!
//! Near a threshold `λ_q` each channel `j` contributes the kernel at
//! `z = z_j + k²` with `z_j = λ_q − λ_j`.  The branch of `ξ` in `k` is fixed
//! by agreement with the physical resolvent for `k` in the first quadrant:
//!
//! * `z_j = 0` (the threshold channel): `ξ = e^{2i·asin(k/2)}`, a simple pole
//!   `i/(2k)` at `k = 0`;
//! * `z_j = 4` (degenerate partner): `ξ = −e^{2i·asin(ik/2)}`, obtained from
//!   the reflection `JΔJ = −Δ + 4`, a pole `(−1)^{n+m+1}/(2k)`;
//! * `z_j ∈ (0, 4)`: `θ = −acos((2 − z_j − k²)/2)`, analytic on the disk;
//! * otherwise: the physical branch of `ξ` at `z_j + k²`, analytic as long
//!   as `|k|²` stays below the distance from `z_j` to `[0, 4]`.

use crate::linalg::{cexpm1, dist_to_band};
use crate::model::{ChannelSpectralData, Side, ThresholdEntry};
use crate::{c64, tol, C64, I};
use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FreeresError {
    #[error("spectral parameter {z} is within {:.1e} of the band [0,4]", tol::ON_SPECTRUM)]
    OnSpectrum { z: C64 },
    #[error("|k| = {knorm:.3e} outside the continuation disk of radius {eps0:.3e} (or at the pole k = 0)")]
    OutsideDisk { knorm: f64, eps0: f64 },
    #[error("channel {channel} sits on a band edge (shift {shift}) without a declared degeneracy")]
    ChannelOnThresholdCollision { channel: usize, shift: C64 },
    #[error("z0 = {z0} is not in [0, 4)")]
    InvalidShift { z0: f64 },
    #[error("weight scheme needs rho > 0 and box >= 1, got rho={rho}, box={box_l}")]
    BadWeights { rho: f64, box_l: i64 },
    #[error("threshold entry must be a left edge; right edges are handled via reflection")]
    RightEdgeUnsupported,
}

/// Physical-branch `ξ(z) = e^{−iθ(z)}`, `|ξ| < 1`, for `z` off `[0, 4]`.
fn xi_physical(z: C64) -> Result<C64, FreeresError> {
    if dist_to_band(z) < tol::ON_SPECTRUM {
        return Err(FreeresError::OnSpectrum { z });
    }
    let w = (c64(2.0, 0.0) - z) / 2.0;
    let sq = (w * w - 1.0).sqrt();
    let s1 = w + sq;
    let s2 = w - sq;
    let s_big = if s1.norm() >= s2.norm() { s1 } else { s2 };
    Ok(1.0 / s_big)
}

/// Unique solution of `2 − 2cos θ = z` with `−π ≤ Re θ ≤ π`, `Im θ < 0`.
pub fn theta(z: C64) -> Result<C64, FreeresError> {
    let xi = xi_physical(z)?;
    // θ = i ln ξ: Im θ = ln|ξ| < 0, Re θ = −arg ξ ∈ (−π, π]
    Ok(I * xi.ln())
}

/// Kernel of `(Δ − z)⁻¹` at sites `(n, m)`, `z ∉ [0, 4]`.
pub fn free_kernel(z: C64, n: i64, m: i64) -> Result<C64, FreeresError> {
    let xi = xi_physical(z)?;
    let d = (n - m).unsigned_abs() as i32;
    Ok(xi.powi(d + 1) / (1.0 - xi * xi))
}

/// Analytic continuation in `k` of the branch `θ(z0 + k²)` through a band
/// point `z0 ∈ [0, 4)`, matching the physical side (first quadrant of `k`).
pub fn theta_continued(z0: f64, k: C64, eps0: f64) -> Result<C64, FreeresError> {
    if !(0.0..4.0).contains(&z0) {
        return Err(FreeresError::InvalidShift { z0 });
    }
    if k.norm() >= eps0 || (z0 == 0.0 && k.norm() == 0.0) {
        return Err(FreeresError::OutsideDisk {
            knorm: k.norm(),
            eps0,
        });
    }
    if z0 == 0.0 {
        Ok(-2.0 * (k / 2.0).asin())
    } else {
        let w = (c64(2.0 - z0, 0.0) - k * k) / 2.0;
        Ok(-w.acos())
    }
}

/// Exponentially decaying sandwich weights on a symmetric lattice box.
///
/// `w₋(n) = e^{−ρ|n|/2} / ‖e^{−ρ|·|/2}‖` and `w₊(n) = 1 / w₋(n)`, with the
/// `ℓ²(ℤ)` norm taken in closed form so that `Σ_{n∈ℤ} w₋(n)² = 1` exactly.
#[derive(Debug, Clone)]
pub struct WeightScheme {
    rho: f64,
    box_l: i64,
    norm: f64,
}

impl WeightScheme {
    pub fn new(rho: f64, box_l: i64) -> Result<Self, FreeresError> {
        if rho <= 0.0 || box_l < 1 {
            return Err(FreeresError::BadWeights { rho, box_l });
        }
        // ‖e^{−ρ|·|/2}‖² = Σ e^{−ρ|n|} = coth(ρ/2)
        let norm = (1.0 / (rho / 2.0).tanh()).sqrt();
        Ok(Self { rho, box_l, norm })
    }

    /// Smallest box with `e^{−ρL/2} < 1e-10`.
    pub fn with_default_box(rho: f64) -> Result<Self, FreeresError> {
        if rho <= 0.0 {
            return Err(FreeresError::BadWeights { rho, box_l: 0 });
        }
        let l = (2.0 * 10.0 * std::f64::consts::LN_10 / rho).ceil() as i64;
        Self::new(rho, l.max(1))
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn box_l(&self) -> i64 {
        self.box_l
    }

    pub fn n_sites(&self) -> usize {
        (2 * self.box_l + 1) as usize
    }

    pub fn sites(&self) -> Vec<i64> {
        (-self.box_l..=self.box_l).collect()
    }

    pub fn w_minus(&self, n: i64) -> f64 {
        (-self.rho * n.abs() as f64 / 2.0).exp() / self.norm
    }

    pub fn w_plus(&self, n: i64) -> f64 {
        self.norm * (self.rho * n.abs() as f64 / 2.0).exp()
    }
}

/// Continuation branch of one spectral channel.
#[derive(Debug, Clone)]
enum Branch {
    /// `z_j` off `[0, 4]`: plain resolvent branch at `z_j + k²`.
    Regular { shift: C64 },
    /// `z_j = 0`, the threshold channel itself.
    LeftEdge,
    /// Wrong-sheet variant of `LeftEdge` for negative-control runs.
    LeftEdgeCorrupted,
    /// `z_j = 4`, the degenerate partner channel.
    RightEdge,
    /// `z_j ∈ (0, 4)`.
    Interior { shift: f64 },
}

/// `ξ`, `dξ/dk` and a cancellation-free `1 − ξ²` for a branch.
struct XiData {
    xi: C64,
    dxi: C64,
    one_minus_xi_sq: C64,
}

impl Branch {
    fn xi_data(&self, k: C64) -> Result<XiData, FreeresError> {
        match *self {
            Branch::LeftEdge => {
                let a = (k / 2.0).asin();
                let xi = (2.0 * I * a).exp();
                let dxi = I * xi / (1.0 - k * k / 4.0).sqrt();
                let omx = -cexpm1(4.0 * I * a);
                Ok(XiData {
                    xi,
                    dxi,
                    one_minus_xi_sq: omx,
                })
            }
            Branch::LeftEdgeCorrupted => {
                // anti-physical sheet: θ ↦ −θ, ξ ↦ 1/ξ
                let a = (k / 2.0).asin();
                let xi = (-2.0 * I * a).exp();
                let dxi = -I * xi / (1.0 - k * k / 4.0).sqrt();
                let omx = -cexpm1(-4.0 * I * a);
                Ok(XiData {
                    xi,
                    dxi,
                    one_minus_xi_sq: omx,
                })
            }
            Branch::RightEdge => {
                let ik = I * k;
                let a = (ik / 2.0).asin();
                let xi0 = (2.0 * I * a).exp();
                let xi = -xi0;
                // dξ/dk = −i·ξ₀'(ik) = −ξ/sqrt(1 + k²/4)
                let dxi = -xi / (1.0 + k * k / 4.0).sqrt();
                let omx = -cexpm1(4.0 * I * a);
                Ok(XiData {
                    xi,
                    dxi,
                    one_minus_xi_sq: omx,
                })
            }
            Branch::Interior { shift } => {
                let w = (c64(2.0 - shift, 0.0) - k * k) / 2.0;
                let th = -w.acos();
                let xi = (-I * th).exp();
                let dxi = -k * xi / (xi - w);
                Ok(XiData {
                    xi,
                    dxi,
                    one_minus_xi_sq: 1.0 - xi * xi,
                })
            }
            Branch::Regular { shift } => {
                let z = shift + k * k;
                let xi = xi_physical(z)?;
                let w = (c64(2.0, 0.0) - z) / 2.0;
                let dxi = -k * xi / (xi - w);
                Ok(XiData {
                    xi,
                    dxi,
                    one_minus_xi_sq: 1.0 - xi * xi,
                })
            }
        }
    }

    /// Radius bound (in `k²`) before the branch hits a singularity.
    fn k2_clearance(&self) -> f64 {
        match *self {
            Branch::LeftEdge | Branch::LeftEdgeCorrupted | Branch::RightEdge => 4.0,
            Branch::Interior { shift } => shift.min(4.0 - shift),
            Branch::Regular { shift } => dist_to_band(shift),
        }
    }

    fn is_singular(&self) -> bool {
        matches!(
            self,
            Branch::LeftEdge | Branch::LeftEdgeCorrupted | Branch::RightEdge
        )
    }
}

#[derive(Debug, Clone)]
struct ResolventChannel {
    branch: Branch,
    proj: Array2<C64>,
}

/// Assembly options for [`assemble_continued_resolvent`].
#[derive(Debug, Clone, Default)]
pub struct AssembleOptions {
    /// Override the automatically derived continuation radius.
    pub eps0: Option<f64>,
    /// Flip the threshold-channel branch to the wrong sheet.  Negative
    /// control for cross-checks; never set in normal runs.
    pub corrupt_branch_sign: bool,
}

/// Truncated weighted free resolvent `𝓦 (H0 − z_q(k))⁻¹ 𝓦` continued in `k`
/// near the left threshold `λ_q`, as a dense-matrix evaluator together with
/// its exact `k`-derivative.
#[derive(Debug, Clone)]
pub struct ContinuedResolvent {
    pub threshold: C64,
    pub channel: usize,
    pub partner: Option<usize>,
    pub eps0: f64,
    pub weights: WeightScheme,
    channels: Vec<ResolventChannel>,
    gdim: usize,
}

/// Builds the channel decomposition `Σ_j W (Δ − (z_j + k²))⁻¹ W ⊗ π_j` with
/// the branch of each channel fixed by its shift `z_j = λ_q − λ_j`.
pub fn assemble_continued_resolvent(
    s: &ChannelSpectralData,
    entry: &ThresholdEntry,
    weights: &WeightScheme,
    opts: &AssembleOptions,
) -> Result<ContinuedResolvent, FreeresError> {
    if entry.side != Side::Left {
        return Err(FreeresError::RightEdgeUnsupported);
    }
    let q = entry.channel;
    let lambda = s.eigenvalues[q];
    let scale = s.eigenvalues.iter().map(|l| l.norm()).fold(1.0, f64::max);
    let edge_tol = 1e-9 * scale;

    let mut channels = Vec::with_capacity(s.n_channels());
    for j in 0..s.n_channels() {
        let shift = lambda - s.eigenvalues[j];
        let branch = if j == q {
            if opts.corrupt_branch_sign {
                Branch::LeftEdgeCorrupted
            } else {
                Branch::LeftEdge
            }
        } else if entry.degenerate_partner == Some(j) {
            Branch::RightEdge
        } else if shift.im.abs() <= edge_tol
            && (shift.re.abs() <= edge_tol || (shift.re - 4.0).abs() <= edge_tol)
        {
            return Err(FreeresError::ChannelOnThresholdCollision { channel: j, shift });
        } else if shift.im.abs() <= 1e-12 * scale && shift.re > 0.0 && shift.re < 4.0 {
            Branch::Interior { shift: shift.re }
        } else {
            Branch::Regular { shift }
        };
        channels.push(ResolventChannel {
            branch,
            proj: s.projections[j].clone(),
        });
    }

    let clearance = channels
        .iter()
        .map(|c| c.branch.k2_clearance())
        .fold(f64::INFINITY, f64::min);
    let eps0 = opts
        .eps0
        .unwrap_or_else(|| tol::EPS0_CAP.min(0.5 * clearance.sqrt()));

    Ok(ContinuedResolvent {
        threshold: lambda,
        channel: q,
        partner: entry.degenerate_partner,
        eps0,
        weights: weights.clone(),
        channels,
        gdim: s.dim(),
    })
}

impl ContinuedResolvent {
    pub fn gdim(&self) -> usize {
        self.gdim
    }

    /// Flattened matrix dimension `(2L+1)·dim 𝔊`.
    pub fn dim(&self) -> usize {
        self.weights.n_sites() * self.gdim
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channel_projection(&self, j: usize) -> &Array2<C64> {
        &self.channels[j].proj
    }

    /// Local spectral parameter `z_q(k) = λ_q + k²`.
    pub fn z_of(&self, k: C64) -> C64 {
        self.threshold + k * k
    }

    fn check_k(&self, k: C64) -> Result<(), FreeresError> {
        let kn = k.norm();
        if kn >= self.eps0 || kn == 0.0 {
            return Err(FreeresError::OutsideDisk {
                knorm: kn,
                eps0: self.eps0,
            });
        }
        Ok(())
    }

    /// Scalar (channel-`j`) weighted kernel block
    /// `w₋(n) ξ^{|n−m|+1}/(1−ξ²) w₋(m)` on `rows × cols`, with derivative.
    pub fn scalar_channel_block(
        &self,
        j: usize,
        rows: &[i64],
        cols: &[i64],
        k: C64,
        with_deriv: bool,
    ) -> Result<(Array2<C64>, Option<Array2<C64>>), FreeresError> {
        self.check_k(k)?;
        let xd = self.channels[j].branch.xi_data(k)?;
        let dmax = rows
            .iter()
            .flat_map(|&n| cols.iter().map(move |&m| (n - m).unsigned_abs()))
            .max()
            .unwrap_or(0) as usize;
        let mut pows = Vec::with_capacity(dmax + 2);
        pows.push(c64(1.0, 0.0));
        for i in 0..=dmax {
            let last = pows[i];
            pows.push(last * xd.xi);
        }
        let omx = xd.one_minus_xi_sq;
        let mut val = Array2::<C64>::zeros((rows.len(), cols.len()));
        let mut der = if with_deriv {
            Some(Array2::<C64>::zeros((rows.len(), cols.len())))
        } else {
            None
        };
        for (i, &n) in rows.iter().enumerate() {
            let wn = self.weights.w_minus(n);
            for (jj, &m) in cols.iter().enumerate() {
                let wm = self.weights.w_minus(m);
                let d = (n - m).unsigned_abs() as usize;
                let ww = wn * wm;
                val[[i, jj]] = ww * pows[d + 1] / omx;
                if let Some(der) = der.as_mut() {
                    let num = c64((d + 1) as f64, 0.0) * omx + 2.0 * xd.xi * xd.xi;
                    der[[i, jj]] = ww * xd.dxi * pows[d] * num / (omx * omx);
                }
            }
        }
        Ok((val, der))
    }

    /// Full weighted resolvent block on `rows × cols` site sets (all of `𝔊`).
    pub fn block(
        &self,
        rows: &[i64],
        cols: &[i64],
        k: C64,
        with_deriv: bool,
    ) -> Result<(Array2<C64>, Option<Array2<C64>>), FreeresError> {
        let g = self.gdim;
        let mut val = Array2::<C64>::zeros((rows.len() * g, cols.len() * g));
        let mut der = if with_deriv { Some(val.clone()) } else { None };
        for (j, ch) in self.channels.iter().enumerate() {
            let (sval, sder) = self.scalar_channel_block(j, rows, cols, k, with_deriv)?;
            for i in 0..rows.len() {
                for jj in 0..cols.len() {
                    for g1 in 0..g {
                        for g2 in 0..g {
                            let p = ch.proj[[g1, g2]];
                            val[[i * g + g1, jj * g + g2]] += sval[[i, jj]] * p;
                            if let (Some(der), Some(sder)) = (der.as_mut(), sder.as_ref()) {
                                der[[i * g + g1, jj * g + g2]] += sder[[i, jj]] * p;
                            }
                        }
                    }
                }
            }
        }
        Ok((val, der))
    }

    /// Full matrix `𝓡₀^{(q)}(k)` on the box.
    pub fn eval(&self, k: C64) -> Result<Array2<C64>, FreeresError> {
        let sites = self.weights.sites();
        Ok(self.block(&sites, &sites, k, false)?.0)
    }

    /// `𝓡₀^{(q)}(k)` together with `d/dk 𝓡₀^{(q)}(k)`.
    pub fn eval_with_deriv(&self, k: C64) -> Result<(Array2<C64>, Array2<C64>), FreeresError> {
        let sites = self.weights.sites();
        let (v, d) = self.block(&sites, &sites, k, true)?;
        Ok((v, d.expect("derivative requested")))
    }

    /// Residue of the simple pole at `k = 0`:
    /// `a₋₁ ⊗ π_q` plus `b₋₁ ⊗ π_p` in the degenerate case, where
    /// `a₋₁(n,m) = (i/2)·w₋(n)w₋(m)` and
    /// `b₋₁(n,m) = ((−1)^{n+m+1}/2)·w₋(n)w₋(m)`.
    pub fn pole_residue(&self) -> Array2<C64> {
        let sites = self.weights.sites();
        let g = self.gdim;
        let n = self.dim();
        let mut out = Array2::<C64>::zeros((n, n));
        for ch in &self.channels {
            if !ch.branch.is_singular() {
                continue;
            }
            let right_edge = matches!(ch.branch, Branch::RightEdge);
            for (i, &ni) in sites.iter().enumerate() {
                for (jj, &mj) in sites.iter().enumerate() {
                    let coeff = if right_edge {
                        let s = if (ni + mj).rem_euclid(2) == 0 { -1.0 } else { 1.0 };
                        c64(s / 2.0, 0.0)
                    } else {
                        I / 2.0
                    };
                    let scalar =
                        coeff * self.weights.w_minus(ni) * self.weights.w_minus(mj);
                    for g1 in 0..g {
                        for g2 in 0..g {
                            out[[i * g + g1, jj * g + g2]] += scalar * ch.proj[[g1, g2]];
                        }
                    }
                }
            }
        }
        out
    }

    /// The part of `𝓡₀^{(q)}(k)` that stays analytic at `k = 0`, evaluated
    /// through cancellation-free remainder kernels for the edge channels.
    pub fn holomorphic(&self, k: C64) -> Result<Array2<C64>, FreeresError> {
        if k.norm() >= self.eps0 {
            return Err(FreeresError::OutsideDisk {
                knorm: k.norm(),
                eps0: self.eps0,
            });
        }
        let sites = self.weights.sites();
        let g = self.gdim;
        let n = self.dim();
        let mut out = Array2::<C64>::zeros((n, n));
        for (j, ch) in self.channels.iter().enumerate() {
            if ch.branch.is_singular() {
                // remainder of the Laurent expansion around the 1/k pole
                let kk = match ch.branch {
                    Branch::RightEdge => I * k,
                    _ => k,
                };
                for (i, &ni) in sites.iter().enumerate() {
                    for (jj, &mj) in sites.iter().enumerate() {
                        let d = (ni - mj).unsigned_abs() as f64;
                        let mut r = edge_remainder(kk, d);
                        if matches!(ch.branch, Branch::RightEdge) && (ni + mj).rem_euclid(2) == 0
                        {
                            r = -r;
                        }
                        let scalar = r * self.weights.w_minus(ni) * self.weights.w_minus(mj);
                        for g1 in 0..g {
                            for g2 in 0..g {
                                out[[i * g + g1, jj * g + g2]] += scalar * ch.proj[[g1, g2]];
                            }
                        }
                    }
                }
            } else {
                let (sval, _) = self.scalar_channel_block(j, &sites, &sites, k, false)?;
                for i in 0..sites.len() {
                    for jj in 0..sites.len() {
                        for g1 in 0..g {
                            for g2 in 0..g {
                                out[[i * g + g1, jj * g + g2]] +=
                                    sval[[i, jj]] * ch.proj[[g1, g2]];
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Remainder `R₀(k²; n, m) − i/(2k)` of the edge kernel, analytic at `0`,
/// written without subtractive cancellation.
fn edge_remainder(k: C64, d: f64) -> C64 {
    let s = (4.0 - k * k).sqrt();
    let a = (k / 2.0).asin();
    let term1 = I * cexpm1(2.0 * I * d * a) / (k * s);
    // i(2 − s)/(2ks) with 2 − s = k²/(2 + s)
    let term2 = I * k / (s * (2.0 + s) * 2.0);
    term1 + term2
}

/// Pole residue plus holomorphic-part evaluator of a continued resolvent.
pub struct SingularSplit<'a> {
    pub residue: Array2<C64>,
    res: &'a ContinuedResolvent,
}

pub fn singular_split(res: &ContinuedResolvent) -> SingularSplit<'_> {
    SingularSplit {
        residue: res.pole_residue(),
        res,
    }
}

impl SingularSplit<'_> {
    pub fn holomorphic(&self, k: C64) -> Result<Array2<C64>, FreeresError> {
        self.res.holomorphic(k)
    }
}
