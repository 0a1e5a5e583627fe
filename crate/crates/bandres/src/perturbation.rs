//! Potentials under the exponential-decay assumption, their weighted
//! sandwiches, and the Birman–Schwinger families whose characteristic values
//! are the resonances.
//!
//! A case-A potential is a site-pair kernel `V(n, m)` of operators on `𝔊`
//! bounded by `C e^{−ρ(|n|+|m|)}`.  A case-B potential is sign-definite and
//! factored, `V = ±(1⊗K†) U (1⊗K)`, with `U` a decaying kernel and `K`
//! compact; the factor regularizes the `𝔊` direction.
//!
//! Resonance search works with the compressed family
//! `F(k) = I + ω·V̂_ρ·𝓡₀(k)|_S` (case A, `S` the site support of `V`) or
//! `F(k) = I_r + ω·(±1)·Ĝ†𝓡₀(k)Ĝ` (case B, `V_ρ = ±ĜĜ†`), both of which
//! have the same determinant as the full `I + 𝒫_ω(z_q(k))`.

use crate::charval::AnalyticFamily;
use crate::freeres::{ContinuedResolvent, FreeresError, WeightScheme};
use crate::linalg::{self, LinalgError};
use crate::model::reflect;
use crate::{c64, tol, C64};
use ndarray::{s, Array2};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PerturbationError {
    #[error("decay bound violated at pair ({n},{m}): ‖block‖ = {norm:.3e} > bound {bound:.3e}")]
    DecayViolation { n: i64, m: i64, norm: f64, bound: f64 },
    #[error("potential decay rate {rho_pot} does not match weight rate {rho_w}")]
    WeightMismatch { rho_pot: f64, rho_w: f64 },
    #[error("case-B factor is not sign-definite within tolerance")]
    NotSignDefinite,
    #[error("operation requires a case-B (factored) potential")]
    NotCaseB,
    #[error("potential blocks must all be square of the channel dimension")]
    BlockShape,
    #[error(transparent)]
    Freeres(#[from] FreeresError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// One kernel entry `V(n, m)` (or `U(n, m)` in case B).
#[derive(Debug, Clone)]
pub struct SitePair {
    pub n: i64,
    pub m: i64,
    pub block: Array2<C64>,
}

#[derive(Debug, Clone)]
pub enum PotentialData {
    CaseA {
        pairs: BTreeMap<(i64, i64), Array2<C64>>,
    },
    CaseB {
        u_pairs: BTreeMap<(i64, i64), Array2<C64>>,
        k_factor: Array2<C64>,
        /// `+1` for `V ≥ 0`, `−1` for `V ≤ 0`.
        sign: f64,
    },
}

/// Perturbation kernel with its certified decay data.
#[derive(Debug, Clone)]
pub struct PotentialSpec {
    pub rho: f64,
    /// Constant `C` of the decay bound.
    pub constant: f64,
    pub data: PotentialData,
}

fn collect_pairs(
    pairs: Vec<SitePair>,
    gdim: usize,
    rho: f64,
    constant: f64,
    square_hull: bool,
) -> Result<BTreeMap<(i64, i64), Array2<C64>>, PerturbationError> {
    let mut map: BTreeMap<(i64, i64), Array2<C64>> = BTreeMap::new();
    for p in pairs {
        if p.block.nrows() != gdim || p.block.ncols() != gdim {
            return Err(PerturbationError::BlockShape);
        }
        // pairs whose decay bound is already negligible are dropped; case B
        // keeps the square hull so that the stored kernel is a principal
        // submatrix and sign-definiteness survives the truncation
        let reach = if square_hull {
            p.n.abs().max(p.m.abs())
        } else {
            p.n.abs() + p.m.abs()
        };
        let bound = constant * (-rho * reach as f64).exp();
        if bound < tol::PAIR_DROP {
            continue;
        }
        match map.entry((p.n, p.m)) {
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(p.block);
            }
            std::collections::btree_map::Entry::Occupied(mut e) => {
                let sum = e.get() + &p.block;
                e.insert(sum);
            }
        }
    }
    Ok(map)
}

impl PotentialSpec {
    pub fn case_a(
        pairs: Vec<SitePair>,
        rho: f64,
        constant: f64,
    ) -> Result<Self, PerturbationError> {
        let gdim = pairs.first().map(|p| p.block.nrows()).unwrap_or(1);
        Ok(Self {
            rho,
            constant,
            data: PotentialData::CaseA {
                pairs: collect_pairs(pairs, gdim, rho, constant, false)?,
            },
        })
    }

    pub fn case_b(
        u_pairs: Vec<SitePair>,
        k_factor: Array2<C64>,
        sign: f64,
        rho: f64,
        constant: f64,
    ) -> Result<Self, PerturbationError> {
        let gdim = k_factor.nrows();
        if k_factor.ncols() != gdim {
            return Err(PerturbationError::BlockShape);
        }
        Ok(Self {
            rho,
            constant,
            data: PotentialData::CaseB {
                u_pairs: collect_pairs(u_pairs, gdim, rho, constant, true)?,
                k_factor,
                sign: if sign < 0.0 { -1.0 } else { 1.0 },
            },
        })
    }

    pub fn gdim(&self) -> usize {
        match &self.data {
            PotentialData::CaseA { pairs } => pairs.values().next().map(|b| b.nrows()).unwrap_or(1),
            PotentialData::CaseB { k_factor, .. } => k_factor.nrows(),
        }
    }

    pub fn is_case_b(&self) -> bool {
        matches!(self.data, PotentialData::CaseB { .. })
    }

    pub fn sign(&self) -> f64 {
        match &self.data {
            PotentialData::CaseB { sign, .. } => *sign,
            PotentialData::CaseA { .. } => 0.0,
        }
    }

    pub fn kernel_pairs(&self) -> &BTreeMap<(i64, i64), Array2<C64>> {
        match &self.data {
            PotentialData::CaseA { pairs } => pairs,
            PotentialData::CaseB { u_pairs, .. } => u_pairs,
        }
    }

    /// Sorted union of sites carrying kernel entries.
    pub fn site_support(&self) -> Vec<i64> {
        let mut set = std::collections::BTreeSet::new();
        for &(n, m) in self.kernel_pairs().keys() {
            set.insert(n);
            set.insert(m);
        }
        set.into_iter().collect()
    }

    /// Kernel block `V(n, m)` (case B: `K† U(n,m) K`).
    pub fn v_block(&self, n: i64, m: i64) -> Array2<C64> {
        let g = self.gdim();
        match &self.data {
            PotentialData::CaseA { pairs } => pairs
                .get(&(n, m))
                .cloned()
                .unwrap_or_else(|| Array2::zeros((g, g))),
            PotentialData::CaseB {
                u_pairs, k_factor, ..
            } => {
                let kc = k_factor.t().mapv(|z| z.conj());
                match u_pairs.get(&(n, m)) {
                    Some(u) => kc.dot(u).dot(k_factor),
                    None => Array2::zeros((g, g)),
                }
            }
        }
    }

    /// Dense `V` on the flattened `sites × sites ⊗ 𝔊` block.
    pub fn v_matrix(&self, sites: &[i64]) -> Array2<C64> {
        let g = self.gdim();
        let n = sites.len() * g;
        let mut out = Array2::<C64>::zeros((n, n));
        for (i, &ni) in sites.iter().enumerate() {
            for (j, &mj) in sites.iter().enumerate() {
                let b = self.v_block(ni, mj);
                out.slice_mut(s![i * g..(i + 1) * g, j * g..(j + 1) * g])
                    .assign(&b);
            }
        }
        out
    }

    /// Dense `V_ρ = W_ρ V W_ρ` on `sites × sites ⊗ 𝔊`.
    pub fn v_rho_matrix(
        &self,
        w: &WeightScheme,
        sites: &[i64],
    ) -> Result<Array2<C64>, PerturbationError> {
        if (w.rho() - self.rho).abs() > 1e-12 {
            return Err(PerturbationError::WeightMismatch {
                rho_pot: self.rho,
                rho_w: w.rho(),
            });
        }
        let g = self.gdim();
        let mut out = self.v_matrix(sites);
        for (i, &ni) in sites.iter().enumerate() {
            let wi = w.w_plus(ni);
            for (j, &mj) in sites.iter().enumerate() {
                let wj = w.w_plus(mj);
                for g1 in 0..g {
                    for g2 in 0..g {
                        out[[i * g + g1, j * g + g2]] *= wi * wj;
                    }
                }
            }
        }
        Ok(out)
    }

    /// The reflected perturbation `−J V J`: blocks pick up `(−1)^{n+m+1}`
    /// and a case-B potential flips its sign tag.
    pub fn reflected(&self) -> Self {
        let map_pairs = |pairs: &BTreeMap<(i64, i64), Array2<C64>>| {
            pairs
                .iter()
                .map(|(&(n, m), b)| {
                    let s = reflect::block_sign(n, m);
                    ((n, m), b.mapv(|z| z * s))
                })
                .collect::<BTreeMap<_, _>>()
        };
        let data = match &self.data {
            PotentialData::CaseA { pairs } => PotentialData::CaseA {
                pairs: map_pairs(pairs),
            },
            PotentialData::CaseB {
                u_pairs,
                k_factor,
                sign,
            } => PotentialData::CaseB {
                u_pairs: map_pairs(u_pairs),
                k_factor: k_factor.clone(),
                sign: -sign,
            },
        };
        Self {
            rho: self.rho,
            constant: self.constant,
            data,
        }
    }
}

/// Convenience: `coeff · |δ_n⟩⟨δ_m| ⊗ |e_j⟩⟨e_k|`.
pub fn rank_one_pair(n: i64, m: i64, j: usize, k: usize, coeff: C64, gdim: usize) -> SitePair {
    let mut block = Array2::<C64>::zeros((gdim, gdim));
    block[[j, k]] = coeff;
    SitePair { n, m, block }
}

/// Separable profile `scale · e^{−ρ(|n|+|m|)} · block` on the full square
/// of sites whose one-sided decay is above the drop cutoff (the potential
/// constructors apply their own drop rule on top).
pub fn exp_profile_pairs(rho: f64, block: &Array2<C64>, scale: f64) -> Vec<SitePair> {
    let nmax = ((-(tol::PAIR_DROP / scale.max(1e-300)).ln()) / rho).ceil() as i64;
    let mut out = Vec::new();
    for n in -nmax..=nmax {
        for m in -nmax..=nmax {
            let c = scale * (-rho * (n.abs() + m.abs()) as f64).exp();
            out.push(SitePair {
                n,
                m,
                block: block.mapv(|z| z * c),
            });
        }
    }
    out
}

/// Per-pair decay margins against `C e^{−ρ(|n|+|m|)}`.
#[derive(Debug, Clone, serde::Serialize)]
pub struct DecayEntry {
    pub n: i64,
    pub m: i64,
    pub norm: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct DecayReport {
    pub ok: bool,
    /// Largest `‖block‖ / bound` over pairs.
    pub worst_ratio: f64,
    pub entries: Vec<DecayEntry>,
}

/// Checks `‖V(n,m)‖ ≤ C e^{−ρ(|n|+|m|)}` pair by pair.
pub fn validate_decay(p: &PotentialSpec) -> Result<DecayReport, PerturbationError> {
    let mut entries = Vec::new();
    let mut worst: Option<(i64, i64, f64, f64)> = None;
    let mut worst_ratio = 0.0f64;
    for (&(n, m), block) in p.kernel_pairs() {
        let norm = linalg::opnorm2(block)?;
        let bound = p.constant * (-p.rho * (n.abs() + m.abs()) as f64).exp();
        let ratio = norm / bound.max(1e-300);
        entries.push(DecayEntry { n, m, norm, bound });
        if ratio > worst_ratio {
            worst_ratio = ratio;
            worst = Some((n, m, norm, bound));
        }
    }
    if worst_ratio > 1.0 + 1e-9 {
        let (n, m, norm, bound) = worst.expect("worst pair recorded");
        return Err(PerturbationError::DecayViolation { n, m, norm, bound });
    }
    Ok(DecayReport {
        ok: true,
        worst_ratio,
        entries,
    })
}

/// `V_ρ = W_ρ V W_ρ` on the full box of `w`.
pub fn assemble_vrho(
    p: &PotentialSpec,
    w: &WeightScheme,
) -> Result<Array2<C64>, PerturbationError> {
    validate_decay(p)?;
    p.v_rho_matrix(w, &w.sites())
}

/// Full-box matrix of `𝒫_ω(z_q(k)) = ω W_ρ V (H0 − z_q(k))⁻¹ W_{−ρ}`,
/// realized as `ω V_ρ 𝓡₀(k)`.
pub fn assemble_p(
    p: &PotentialSpec,
    res: &ContinuedResolvent,
    omega: C64,
    k: C64,
) -> Result<Array2<C64>, PerturbationError> {
    let w = &res.weights;
    let sites = w.sites();
    let support = p.site_support();
    let vr = p.v_rho_matrix(w, &support)?;
    let (rblock, _) = res.block(&support, &sites, k, false)?;
    let prod = vr.dot(&rblock).mapv(|z| z * omega);
    let g = p.gdim();
    let n = res.dim();
    let mut out = Array2::<C64>::zeros((n, n));
    for (i, &ni) in support.iter().enumerate() {
        let row0 = ((ni + w.box_l()) as usize) * g;
        for gi in 0..g {
            for c in 0..n {
                out[[row0 + gi, c]] = prod[[i * g + gi, c]];
            }
        }
    }
    Ok(out)
}

/// Compressed case-B operator `X_ω(z_q(k)) = ω·(±1)·Ĝ† 𝓡₀(k) Ĝ` where
/// `V_ρ = ±ĜĜ†`; `det(I_r + X)` equals `det(I + 𝒫_ω)`.
pub fn assemble_x(
    p: &PotentialSpec,
    res: &ContinuedResolvent,
    omega: C64,
    k: C64,
) -> Result<Array2<C64>, PerturbationError> {
    if !p.is_case_b() {
        return Err(PerturbationError::NotCaseB);
    }
    let fam = birman_schwinger(p, res, omega)?;
    let mut f = fam.eval_inner(k, false)?.0;
    for i in 0..f.nrows() {
        f[[i, i]] -= 1.0;
    }
    Ok(f)
}

enum Rep {
    /// Case A compressed onto the site support `S` of `V`:
    /// `F(k) = I + ω V̂_ρ 𝓡₀(k)|_{S×S}`.
    DenseSites { sites: Vec<i64>, v_rho: Array2<C64> },
    /// Case B: `F(k) = I_r + ω·sign·Ĝ†𝓡₀(k)Ĝ` with the site direction of
    /// `Ĝ` compressed onto an orthonormal basis `q_site`.
    Factored {
        sites: Vec<i64>,
        sign: f64,
        /// site basis, `|S| × r_s`
        q_site: Array2<C64>,
        /// `(r_s·G) × r` coefficients of `Ĝ` in the site basis
        gamma_tilde: Array2<C64>,
        /// full `Ĝ` on the support, `(|S|·G) × r`
        gamma_support: Array2<C64>,
    },
}

/// Analytic Birman–Schwinger family at fixed `ω`, compressed so that node
/// evaluations cost a small dense matrix while `det F` matches the full
/// `det(I + 𝒫_ω(z_q(·)))` identically.
pub struct BirmanSchwinger {
    pub omega: C64,
    res: ContinuedResolvent,
    rep: Rep,
}

/// Builds the compressed family for `pot` at coupling `omega`.
pub fn birman_schwinger(
    pot: &PotentialSpec,
    res: &ContinuedResolvent,
    omega: C64,
) -> Result<BirmanSchwinger, PerturbationError> {
    validate_decay(pot)?;
    let w = &res.weights;
    let sites = pot.site_support();
    if sites.iter().any(|&n| n.abs() > w.box_l()) {
        // support must live inside the box (default boxes guarantee this)
        return Err(PerturbationError::WeightMismatch {
            rho_pot: pot.rho,
            rho_w: w.rho(),
        });
    }
    match &pot.data {
        PotentialData::CaseA { .. } => {
            let v_rho = pot.v_rho_matrix(w, &sites)?;
            Ok(BirmanSchwinger {
                omega,
                res: res.clone(),
                rep: Rep::DenseSites { sites, v_rho },
            })
        }
        PotentialData::CaseB {
            u_pairs,
            k_factor,
            sign,
        } => {
            let g = pot.gdim();
            // 𝒰 = W_ρ U W_ρ on the support must be sign-definite
            let mut u_rho = Array2::<C64>::zeros((sites.len() * g, sites.len() * g));
            for (i, &n) in sites.iter().enumerate() {
                for (j, &m) in sites.iter().enumerate() {
                    if let Some(b) = u_pairs.get(&(n, m)) {
                        let ww = w.w_plus(n) * w.w_plus(m);
                        for g1 in 0..g {
                            for g2 in 0..g {
                                u_rho[[i * g + g1, j * g + g2]] = b[[g1, g2]] * ww;
                            }
                        }
                    }
                }
            }
            let signed = u_rho.mapv(|z| z * *sign);
            let phi = linalg::psd_sqrt_factor(&signed, tol::SIGN_DEFINITE, 1e-14)
                .map_err(|_| PerturbationError::NotSignDefinite)?;
            // Ĝ = (1 ⊗ K†) Φ
            let kc = k_factor.t().mapv(|z| z.conj());
            let r = phi.ncols();
            let mut gamma = Array2::<C64>::zeros((sites.len() * g, r));
            for i in 0..sites.len() {
                let block = phi.slice(s![i * g..(i + 1) * g, ..]);
                let mapped = kc.dot(&block);
                gamma.slice_mut(s![i * g..(i + 1) * g, ..]).assign(&mapped);
            }
            // site-rank compression: SVD of Ĝ reshaped to |S| × (G·r)
            let mut resh = Array2::<C64>::zeros((sites.len(), g * r));
            for i in 0..sites.len() {
                for gi in 0..g {
                    for a in 0..r {
                        resh[[i, gi * r + a]] = gamma[[i * g + gi, a]];
                    }
                }
            }
            let (u, sv, _) = linalg::svd_full(&resh)?;
            let smax = sv.iter().cloned().fold(0.0f64, f64::max).max(1e-300);
            let rs = sv.iter().filter(|&&x| x > 1e-13 * smax).count().max(1);
            let q_site = u.slice(s![.., ..rs]).to_owned();
            // Γ̃ = (Q† ⊗ I_G) Ĝ
            let mut gamma_tilde = Array2::<C64>::zeros((rs * g, r));
            for b in 0..rs {
                for gi in 0..g {
                    for a in 0..r {
                        let mut acc = c64(0.0, 0.0);
                        for i in 0..sites.len() {
                            acc += q_site[[i, b]].conj() * gamma[[i * g + gi, a]];
                        }
                        gamma_tilde[[b * g + gi, a]] = acc;
                    }
                }
            }
            Ok(BirmanSchwinger {
                omega,
                res: res.clone(),
                rep: Rep::Factored {
                    sites,
                    sign: *sign,
                    q_site,
                    gamma_tilde,
                    gamma_support: gamma,
                },
            })
        }
    }
}

impl BirmanSchwinger {
    pub fn resolvent(&self) -> &ContinuedResolvent {
        &self.res
    }

    fn eval_inner(
        &self,
        k: C64,
        with_deriv: bool,
    ) -> Result<(Array2<C64>, Option<Array2<C64>>), FreeresError> {
        match &self.rep {
            Rep::DenseSites { sites, v_rho } => {
                let (rb, rd) = self.res.block(sites, sites, k, with_deriv)?;
                let mut f = v_rho.dot(&rb).mapv(|z| z * self.omega);
                for i in 0..f.nrows() {
                    f[[i, i]] += 1.0;
                }
                let fd = rd.map(|d| v_rho.dot(&d).mapv(|z| z * self.omega));
                Ok((f, fd))
            }
            Rep::Factored {
                sites,
                sign,
                q_site,
                gamma_tilde,
                ..
            } => {
                let g = self.res.gdim();
                let rs = q_site.ncols();
                let r = gamma_tilde.ncols();
                let mut f = Array2::<C64>::eye(r);
                let mut fd = if with_deriv {
                    Some(Array2::<C64>::zeros((r, r)))
                } else {
                    None
                };
                let coeff = self.omega * *sign;
                let qc = q_site.mapv(|z| z.conj());
                for j in 0..self.res.n_channels() {
                    let (tw, twd) =
                        self.res
                            .scalar_channel_block(j, sites, sites, k, with_deriv)?;
                    let pj = self.res.channel_projection(j);
                    let sj = qc.t().dot(&tw).dot(q_site);
                    // C_j = Γ̃† (S_j ⊗ π_j) Γ̃
                    let add = sandwich_kron(gamma_tilde, &sj, pj, rs, g);
                    f = f + add.mapv(|z| z * coeff);
                    if let (Some(fd), Some(twd)) = (fd.as_mut(), twd.as_ref()) {
                        let sjd = qc.t().dot(twd).dot(q_site);
                        let addd = sandwich_kron(gamma_tilde, &sjd, pj, rs, g);
                        *fd = &*fd + &addd.mapv(|z| z * coeff);
                    }
                }
                Ok((f, fd))
            }
        }
    }

    /// Dimension of the compressed family.
    pub fn family_dim(&self) -> usize {
        match &self.rep {
            Rep::DenseSites { v_rho, .. } => v_rho.nrows(),
            Rep::Factored { gamma_tilde, .. } => gamma_tilde.ncols(),
        }
    }

    /// Low-rank factors `(A, B)` with `𝓡_ω(k) − 𝓡₀(k) = A·B` on the box.
    pub fn resolvent_correction(
        &self,
        k: C64,
    ) -> Result<(Array2<C64>, Array2<C64>), PerturbationError> {
        let all = self.res.weights.sites();
        match &self.rep {
            Rep::DenseSites { sites, v_rho } => {
                let (r_cols, _) = self.res.block(&all, sites, k, false)?;
                let (r_rows, _) = self.res.block(sites, &all, k, false)?;
                let (r_ss, _) = self.res.block(sites, sites, k, false)?;
                let mut m = r_ss.dot(v_rho).mapv(|z| z * self.omega);
                for i in 0..m.nrows() {
                    m[[i, i]] += 1.0;
                }
                let minv = linalg::inv(&m)?;
                let a = r_cols.dot(v_rho);
                let b = minv.dot(&r_rows).mapv(|z| z * (-self.omega));
                Ok((a, b))
            }
            Rep::Factored {
                sites,
                sign,
                gamma_support,
                ..
            } => {
                let (r_cols, _) = self.res.block(&all, sites, k, false)?;
                let (r_rows, _) = self.res.block(sites, &all, k, false)?;
                let a = r_cols.dot(gamma_support);
                let f = self.eval_inner(k, false)?.0;
                let finv = linalg::inv(&f)?;
                let gt = gamma_support.t().mapv(|z| z.conj());
                let b = finv
                    .dot(&gt.dot(&r_rows))
                    .mapv(|z| z * (-self.omega * *sign));
                Ok((a, b))
            }
        }
    }
}

/// `Γ† (S ⊗ π) Γ` for `Γ` of shape `(r_s·G) × r`.
fn sandwich_kron(
    gamma: &Array2<C64>,
    s_site: &Array2<C64>,
    pi: &Array2<C64>,
    rs: usize,
    g: usize,
) -> Array2<C64> {
    let r = gamma.ncols();
    // y = (S ⊗ π) Γ
    let mut y = Array2::<C64>::zeros((rs * g, r));
    for b1 in 0..rs {
        for g1 in 0..g {
            for a in 0..r {
                let mut acc = c64(0.0, 0.0);
                for b2 in 0..rs {
                    let sv = s_site[[b1, b2]];
                    if sv.norm_sqr() == 0.0 {
                        continue;
                    }
                    for g2 in 0..g {
                        acc += sv * pi[[g1, g2]] * gamma[[b2 * g + g2, a]];
                    }
                }
                y[[b1 * g + g1, a]] = acc;
            }
        }
    }
    gamma.t().mapv(|z| z.conj()).dot(&y)
}

impl AnalyticFamily for BirmanSchwinger {
    fn dim(&self) -> usize {
        self.family_dim()
    }

    fn eval(&self, k: C64) -> Result<Array2<C64>, crate::charval::CharvalError> {
        Ok(self.eval_inner(k, false).map(|(f, _)| f)?)
    }

    fn eval_with_deriv(
        &self,
        k: C64,
    ) -> Result<(Array2<C64>, Array2<C64>), crate::charval::CharvalError> {
        let (f, fd) = self.eval_inner(k, true)?;
        Ok((f, fd.expect("derivative requested")))
    }
}
