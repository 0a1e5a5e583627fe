//! Case B near the threshold `0`: accumulation of resonances, the counting
//! law against the compact operator `E₀`, and the sector / sheet taxonomy.
//!
//! With a sign-definite factored perturbation the resonances near `0`
//! satisfy `k ≈ −i ω ζ` with `ζ` running through the positive spectrum of
//! `Q₀ = −i L W_ρ (a₋₁ ⊗ π₀) W_ρ L†`, whose nonzero spectrum is half that of
//! `E₀ = Π₀ V_ρ Π₀`.  Counting resonances in shrinking annuli
//! `ε_j |ω| < |k| < ε₀ |ω|` therefore reproduces the eigenvalue counting
//! function `n_{[2ε_j, 2]}(E₀)`, saturating at `rank E₀` on a truncation.

use crate::charval::{ResonanceRecord, Sheet};
use crate::freeres::WeightScheme;
use crate::linalg::{self, LinalgError};
use crate::model::ChannelSpectralData;
use crate::perturbation::{PerturbationError, PotentialData, PotentialSpec};
use crate::{tol, C64};
use ndarray::{Array1, Array2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AccumulationError {
    #[error("operation requires a case-B potential and spectral data with a kernel channel")]
    NotCaseB,
    #[error("2ε = {eps2:.6e} within 10% of an eigenvalue {eig:.6e} of E₀")]
    EpsilonOnSpectrum { eps2: f64, eig: f64 },
    #[error(transparent)]
    Perturbation(#[from] PerturbationError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Eigenvalue counting function `n_I(T)` of a Hermitian compact operator,
/// realized by its (sign-adjusted) eigenvalue list.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CountingFunction {
    /// Nonzero eigenvalues of `sign·E₀`, descending.
    pub eigenvalues: Vec<f64>,
}

impl CountingFunction {
    pub fn new(mut eigenvalues: Vec<f64>) -> Self {
        eigenvalues.retain(|&x| x > 0.0);
        eigenvalues.sort_by(|a, b| b.partial_cmp(a).unwrap());
        Self { eigenvalues }
    }

    /// Number of eigenvalues in `[a, b]`, with multiplicity.
    pub fn count(&self, a: f64, b: f64) -> usize {
        self.eigenvalues
            .iter()
            .filter(|&&x| x >= a && x <= b)
            .count()
    }

    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn norm(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(0.0)
    }

    pub fn min_positive(&self) -> Option<f64> {
        self.eigenvalues.last().copied()
    }
}

/// Compressed spectral data of the pair `(Q₀, E₀)`.
#[derive(Debug, Clone)]
pub struct ThresholdPair {
    /// Nonzero eigenvalues of `sign·Q₀` (descending).
    pub q0_eigenvalues: Vec<f64>,
    /// Counting function of `sign·E₀`.
    pub e0: CountingFunction,
    pub rank: usize,
}

/// Builds `Q₀` and `E₀` in the compressed factor coordinates:
/// `sign·E₀ = (Π₀Ĝ)(Π₀Ĝ)†` with `V_ρ = sign·ĜĜ†`, so the nonzero spectrum
/// comes from the small Gram matrix `Ĝ†Π₀Ĝ`, and `Q₀ = E₀/2` on nonzero
/// spectrum.
pub fn build_q0_e0(
    pot: &PotentialSpec,
    s: &ChannelSpectralData,
    w: &WeightScheme,
) -> Result<ThresholdPair, AccumulationError> {
    let zero = s.zero_channel.ok_or(AccumulationError::NotCaseB)?;
    let (u_pairs, k_factor, sign) = match &pot.data {
        PotentialData::CaseB {
            u_pairs,
            k_factor,
            sign,
        } => (u_pairs, k_factor, *sign),
        _ => return Err(AccumulationError::NotCaseB),
    };
    let g = pot.gdim();
    let sites = pot.site_support();
    // Φ with sign·W_ρ U W_ρ = Φ Φ† on the support
    let mut u_rho = Array2::<C64>::zeros((sites.len() * g, sites.len() * g));
    for (i, &n) in sites.iter().enumerate() {
        for (j, &m) in sites.iter().enumerate() {
            if let Some(b) = u_pairs.get(&(n, m)) {
                let ww = w.w_plus(n) * w.w_plus(m);
                for g1 in 0..g {
                    for g2 in 0..g {
                        u_rho[[i * g + g1, j * g + g2]] = b[[g1, g2]] * sign * ww;
                    }
                }
            }
        }
    }
    let phi = linalg::psd_sqrt_factor(&u_rho, tol::SIGN_DEFINITE, 1e-14)
        .map_err(|_| AccumulationError::NotCaseB)?;
    let r = phi.ncols();
    // Ĝ = (1 ⊗ K†) Φ, then ĥ_a = (⟨w| ⊗ π₀ K†... ) — contract Π₀ = |w⟩⟨w|⊗π₀:
    // (Π₀ Ĝ)† (Π₀ Ĝ) = H† H with H[*, a] = π₀ K† Σ_n w(n) Φ[(n,·), a]
    let kc = k_factor.t().mapv(|z| z.conj());
    let pi0 = &s.projections[zero];
    let mut h = Array2::<C64>::zeros((g, r));
    for a in 0..r {
        let mut acc = Array1::<C64>::zeros(g);
        for (i, &n) in sites.iter().enumerate() {
            let wn = w.w_minus(n);
            for g1 in 0..g {
                acc[g1] += wn * phi[[i * g + g1, a]];
            }
        }
        let mapped = pi0.dot(&kc.dot(&acc));
        for g1 in 0..g {
            h[[g1, a]] = mapped[g1];
        }
    }
    let gram = h.t().mapv(|z| z.conj()).dot(&h); // r × r Hermitian PSD
    let (vals, _) = linalg::eigh(&gram)?;
    let vmax = vals.iter().cloned().fold(0.0f64, f64::max);
    let nonzero: Vec<f64> = vals
        .iter()
        .cloned()
        .filter(|&x| x > 1e-12 * vmax.max(1e-300))
        .collect();
    let e0 = CountingFunction::new(nonzero.clone());
    let q0: Vec<f64> = e0.eigenvalues.iter().map(|x| x / 2.0).collect();
    let rank = e0.rank();
    Ok(ThresholdPair {
        q0_eigenvalues: q0,
        e0,
        rank,
    })
}

/// Dense `E₀ = Π₀ V_ρ Π₀` on the box, for rank and spectrum cross-checks.
pub fn e0_dense(
    pot: &PotentialSpec,
    s: &ChannelSpectralData,
    w: &WeightScheme,
) -> Result<Array2<C64>, AccumulationError> {
    let zero = s.zero_channel.ok_or(AccumulationError::NotCaseB)?;
    if !pot.is_case_b() {
        return Err(AccumulationError::NotCaseB);
    }
    let g = s.dim();
    let sites = w.sites();
    let n = sites.len() * g;
    let v_rho = pot.v_rho_matrix(w, &sites)?;
    let mut pi = Array2::<C64>::zeros((n, n));
    let pi0 = &s.projections[zero];
    for (i, &ni) in sites.iter().enumerate() {
        for (j, &mj) in sites.iter().enumerate() {
            let ww = w.w_minus(ni) * w.w_minus(mj);
            for g1 in 0..g {
                for g2 in 0..g {
                    pi[[i * g + g1, j * g + g2]] = ww * pi0[[g1, g2]];
                }
            }
        }
    }
    Ok(pi.dot(&v_rho).dot(&pi))
}

/// Geometric `ε_j` ladder: halving from `‖E₀‖`, nudged off eigenvalues of
/// `E₀` (no eigenvalue within 10% of `2ε_j`), until below half the smallest
/// nonzero eigenvalue, where the annulus count saturates at `rank E₀`.
pub fn default_epsilon_sequence(e0: &CountingFunction) -> Vec<f64> {
    let mut out = Vec::new();
    let norm = e0.norm();
    if norm == 0.0 {
        return out;
    }
    let floor = e0.min_positive().unwrap_or(norm) / 2.0;
    let mut eps = norm;
    loop {
        let mut adj = eps;
        for _ in 0..8 {
            let bad = e0
                .eigenvalues
                .iter()
                .any(|&mu| (2.0 * adj - mu).abs() < 0.1 * mu);
            if !bad {
                break;
            }
            adj *= 1.12;
        }
        if out.last().map_or(true, |&last: &f64| adj < last) {
            out.push(adj);
        }
        if eps < 0.45 * floor {
            break;
        }
        eps /= 2.0;
    }
    out
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct CountingRow {
    pub eps: f64,
    /// Resonances (with multiplicity) in `ε|ω| < |k| < ε₀|ω|`.
    pub annulus_count: usize,
    /// `n_{[2ε, 2]}(E₀)`.
    pub expected: usize,
    pub deviation: i64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct CountingReport {
    pub rows: Vec<CountingRow>,
    pub rank_e0: usize,
    /// Count of the deepest annulus.
    pub saturated_count: usize,
    /// Every row within ±1 of the expectation.
    pub within_one: bool,
    /// Deepest annulus saw the full rank.
    pub saturates: bool,
}

/// Compares annulus resonance counts against the `E₀` counting function.
pub fn verify_counting(
    records: &[ResonanceRecord],
    e0: &CountingFunction,
    eps_seq: &[f64],
    omega_mod: f64,
    eps0: f64,
) -> Result<CountingReport, AccumulationError> {
    let mut rows = Vec::new();
    for &eps in eps_seq {
        for &mu in &e0.eigenvalues {
            if (2.0 * eps - mu).abs() < 0.1 * mu {
                return Err(AccumulationError::EpsilonOnSpectrum {
                    eps2: 2.0 * eps,
                    eig: mu,
                });
            }
        }
        let lo = eps * omega_mod;
        let hi = eps0 * omega_mod;
        let count: usize = records
            .iter()
            .filter(|r| r.k.norm() > lo && r.k.norm() < hi)
            .map(|r| r.mult_index)
            .sum();
        let expected = e0.count(2.0 * eps, 2.0);
        rows.push(CountingRow {
            eps,
            annulus_count: count,
            expected,
            deviation: count as i64 - expected as i64,
        });
    }
    let within_one = rows.iter().all(|r| r.deviation.abs() <= 1);
    let saturated_count = rows.last().map_or(0, |r| r.annulus_count);
    Ok(CountingReport {
        rank_e0: e0.rank(),
        saturated_count,
        within_one,
        saturates: saturated_count == e0.rank(),
        rows,
    })
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SectorRow {
    #[serde(serialize_with = "crate::charval::ser_c64")]
    pub k: C64,
    /// `Im(k/ω)`, sign-adjusted so the theorem predicts `≤ 0`.
    pub im_k_over_omega: f64,
    /// `|Re(k/ω)| / |k/ω|`.
    pub rel_re: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SectorReport {
    pub rows: Vec<SectorRow>,
    pub max_im: f64,
    pub max_rel_re: f64,
    /// `Im(k/ω) ≤ 1e-8` for all records (after the sign adjustment).
    pub im_ok: bool,
    /// `|Re(k/ω)|/|k/ω| ≤ θ` for all records.
    pub sector_ok: bool,
}

/// Sector confinement: for `V ≥ 0` resonances near `0` satisfy
/// `Im(k/ω) ≤ 0` and `|Re(k/ω)| = o(|k/ω|)`; for `V ≤ 0` the mirror image.
pub fn verify_sector(
    records: &[ResonanceRecord],
    omega: C64,
    sign: f64,
    theta_max: f64,
) -> SectorReport {
    let mut rows = Vec::new();
    for r in records {
        let zeta = r.k / omega;
        rows.push(SectorRow {
            k: r.k,
            im_k_over_omega: sign * zeta.im,
            rel_re: zeta.re.abs() / zeta.norm().max(1e-300),
        });
    }
    let max_im = rows.iter().map(|r| r.im_k_over_omega).fold(f64::MIN, f64::max);
    let max_rel_re = rows.iter().map(|r| r.rel_re).fold(0.0, f64::max);
    SectorReport {
        im_ok: rows.is_empty() || max_im <= 1e-8,
        sector_ok: rows.is_empty() || max_rel_re <= theta_max,
        max_im: if rows.is_empty() { f64::NEG_INFINITY } else { max_im },
        max_rel_re,
        rows,
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SheetClassification {
    pub observed: Sheet,
    pub expected: Option<Sheet>,
    pub matches: Option<bool>,
}

/// Sheet placement against the corollary table: for `V ≥ 0` the resonances
/// near `0` sit on the second sheet when `|Arg ω| < π/2` and on the first
/// when `|Arg ω| > π/2`; for `V ≤ 0` the placements swap.
pub fn classify_sheet(record: &ResonanceRecord, omega: C64, sign: f64) -> SheetClassification {
    let arg = omega.arg().abs();
    let fp2 = std::f64::consts::FRAC_PI_2;
    let expected = if (arg - fp2).abs() < 1e-12 {
        None
    } else {
        let second_for_positive = arg < fp2;
        let second = if sign >= 0.0 {
            second_for_positive
        } else {
            !second_for_positive
        };
        Some(if second { Sheet::Second } else { Sheet::First })
    };
    SheetClassification {
        observed: record.sheet,
        matches: expected.map(|e| e == record.sheet),
        expected,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::charval::{certify_records, locate_characteristic_values, sheet_of, LocateOptions};
    use crate::freeres::{assemble_continued_resolvent, AssembleOptions};
    use crate::linalg::{rank_rel, svdvals};
    use crate::model::{classify_thresholds, diagonalize_channel, ChannelMatrix, SpectralCase};
    use crate::oracle::BoxedHamiltonian;
    use crate::perturbation::{birman_schwinger, exp_profile_pairs};
    use crate::{c64, model};

    fn case_b_model(j: usize) -> (ChannelSpectralData, model::ThresholdEntry, WeightScheme) {
        let m = ChannelMatrix::semistrip(1, j).unwrap();
        let s = diagonalize_channel(&m).unwrap().into_case_b().unwrap();
        let cat = classify_thresholds(&s, SpectralCase::B).unwrap();
        let entry = cat.find_left(c64(0.0, 0.0), 1e-9).unwrap().clone();
        let w = WeightScheme::new(1.0, 36).unwrap();
        (s, entry, w)
    }

    fn inverse_square_potential(j: usize, sign: f64) -> PotentialSpec {
        let mut kf = Array2::<C64>::zeros((j, j));
        for i in 0..j {
            kf[[i, i]] = c64(1.0 / ((i + 1) as f64).powi(2), 0.0);
        }
        // sign·U ⪰ 0: the kernel itself carries the sign of V
        let block = Array2::<C64>::eye(j).mapv(|z| z * sign);
        let pairs = exp_profile_pairs(1.0, &block, 1.0);
        PotentialSpec::case_b(pairs, kf, sign, 1.0, 1.0).unwrap()
    }

    #[test]
    fn q0_e0_rank_and_spectrum_pairing() {
        let j = 5usize;
        let (s, _, w) = case_b_model(j);
        let pot = inverse_square_potential(j, 1.0);
        let pair = build_q0_e0(&pot, &s, &w).unwrap();
        // rank = J − 1: the kernel channel keeps all but the strip direction
        assert_eq!(pair.rank, j - 1);
        assert_eq!(pair.q0_eigenvalues.len(), pair.e0.rank());
        for (q, e) in pair.q0_eigenvalues.iter().zip(&pair.e0.eigenvalues) {
            assert!((q - e / 2.0).abs() < 1e-12 * e.max(1.0));
        }
        // dense-path oracle: SVD of the full E₀ matrix gives the same rank
        // and the same nonzero spectrum
        let e0 = e0_dense(&pot, &s, &w).unwrap();
        let sv = svdvals(&e0).unwrap();
        assert_eq!(rank_rel(&sv, 1e-9), j - 1);
        for (a, b) in sv.iter().take(j - 1).zip(&pair.e0.eigenvalues) {
            assert!(
                (a - b).abs() < 1e-9 * b.max(1e-10),
                "dense σ {a} vs compressed {b}"
            );
        }
    }

    #[test]
    fn zero_factor_gives_zero_operators() {
        let j = 3usize;
        let (s, _, w) = case_b_model(j);
        let kf = Array2::<C64>::zeros((j, j));
        let block = Array2::<C64>::eye(j);
        let pairs = exp_profile_pairs(1.0, &block, 1.0);
        let pot = PotentialSpec::case_b(pairs, kf, 1.0, 1.0, 1.0).unwrap();
        let pair = build_q0_e0(&pot, &s, &w).unwrap();
        assert_eq!(pair.rank, 0);
        assert_eq!(pair.e0.norm(), 0.0);
    }

    #[test]
    fn counting_function_properties() {
        let cf = CountingFunction::new(vec![0.5, 0.1, 0.1, 0.01]);
        assert_eq!(cf.count(0.05, 1.0), 3);
        assert_eq!(cf.count(0.005, 1.0), 4);
        assert_eq!(cf.count(0.6, 2.0), 0);
        // monotone under interval inclusion; additive over a partition
        assert!(cf.count(0.05, 1.0) <= cf.count(0.005, 1.0));
        assert_eq!(
            cf.count(0.0, 0.09) + cf.count(0.09001, 1.0),
            cf.count(0.0, 1.0)
        );
    }

    #[test]
    fn epsilon_ladder_respects_gaps_and_floor() {
        let cf = CountingFunction::new(vec![0.3, 0.03, 0.003]);
        let seq = default_epsilon_sequence(&cf);
        assert!(!seq.is_empty());
        for w in seq.windows(2) {
            assert!(w[1] < w[0]);
        }
        for &eps in &seq {
            for &mu in &cf.eigenvalues {
                assert!((2.0 * eps - mu).abs() >= 0.1 * mu, "eps {eps} vs μ {mu}");
            }
        }
        assert!(*seq.last().unwrap() < 0.003 / 2.0);
    }

    fn run_case_b(
        j: usize,
        sign: f64,
        omega: C64,
        seed: u64,
    ) -> (
        Vec<ResonanceRecord>,
        ThresholdPair,
        f64,
        ChannelSpectralData,
        WeightScheme,
        PotentialSpec,
    ) {
        let (s, entry, w) = case_b_model(j);
        let pot = inverse_square_potential(j, sign);
        let res =
            assemble_continued_resolvent(&s, &entry, &w, &AssembleOptions::default()).unwrap();
        let pair = build_q0_e0(&pot, &s, &w).unwrap();
        let fam = birman_schwinger(&pot, &res, omega).unwrap();
        let radius = res.eps0 * omega.norm();
        let mut opts = LocateOptions::for_region(res.eps0, radius, seed);
        // deepest ζ sits at min(E₀)/2: keep the puncture well below it
        opts.inner_radius = pair.e0.min_positive().unwrap() / 2.0 * omega.norm() * 0.2;
        let zeros = locate_characteristic_values(&fam, radius, &opts).unwrap();
        let recs = certify_records(&fam, &zeros, opts.inner_radius, omega, 0).unwrap();
        (recs, pair, res.eps0, s, w, pot)
    }

    #[test]
    fn repulsive_case_b_counting_and_sector() {
        let omega = c64(0.01, 0.0);
        let (recs, pair, eps0, _, _, _) = run_case_b(4, 1.0, omega, 5);
        // rank E₀ = 3 resonances at ζ ≈ μ_j/2 on the second sheet
        assert_eq!(recs.len(), 3);
        for r in &recs {
            assert_eq!(r.sheet, Sheet::Second);
            assert_eq!(r.mult_index, 1);
            assert_eq!(r.mult_residue, 1);
        }
        let sector = verify_sector(&recs, omega, 1.0, 0.3);
        assert!(sector.im_ok, "max Im(k/ω) = {:.3e}", sector.max_im);
        assert!(sector.sector_ok);
        let eps_seq = default_epsilon_sequence(&pair.e0);
        let report =
            verify_counting(&recs, &pair.e0, &eps_seq, omega.norm(), eps0).unwrap();
        assert!(report.within_one, "{report:?}");
        assert!(report.saturates, "{report:?}");
        // sheet table: V ≥ 0, Arg ω = 0 expects the second sheet
        for r in &recs {
            let cls = classify_sheet(r, omega, 1.0);
            assert_eq!(cls.expected, Some(Sheet::Second));
            assert_eq!(cls.matches, Some(true));
        }
    }

    #[test]
    fn attractive_case_b_eigenvalues_below_zero() {
        let omega = c64(0.01, 0.0);
        let (recs, _, _, s, w, pot) = run_case_b(4, -1.0, omega, 9);
        assert_eq!(recs.len(), 3);
        // first sheet, real z < 0, matching true eigenvalues of H_ω
        let m = ChannelMatrix::semistrip(1, 4).unwrap();
        let ham = BoxedHamiltonian::new(&m.entries, w.box_l());
        let g = s.dim();
        let mut v = Array2::<C64>::zeros((ham.dim(), ham.dim()));
        for (&(n, mm), _) in pot.kernel_pairs() {
            let blk = pot.v_block(n, mm);
            for g1 in 0..g {
                for g2 in 0..g {
                    v[[ham.flat_index(n, g1), ham.flat_index(mm, g2)]] +=
                        omega * blk[[g1, g2]];
                }
            }
        }
        let eigs = ham.perturbed_eigenvalues(&v).unwrap();
        for r in &recs {
            assert_eq!(r.sheet, Sheet::First);
            assert!(r.z.im.abs() < 1e-8);
            assert!(r.z.re < 0.0, "accumulation from the left, z = {}", r.z);
            let best = eigs
                .iter()
                .map(|e| (e - r.z).norm())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 1e-6, "no eigenvalue near z = {} (best {best:.2e})", r.z);
            let cls = classify_sheet(r, omega, -1.0);
            assert_eq!(cls.matches, Some(true));
        }
        let sector = verify_sector(&recs, omega, -1.0, 0.3);
        assert!(sector.im_ok && sector.sector_ok);
    }

    #[test]
    fn rotated_coupling_first_sheet_axis() {
        // V ≥ 0 with Arg ω = 3π/4: first-sheet eigenvalues near the semi-axis
        // at angle 2·Arg ω − π in the z-plane
        let arg = 3.0 * std::f64::consts::PI / 4.0;
        let omega = c64(3e-4 * arg.cos(), 3e-4 * arg.sin());
        let (recs, _, _, _, _, _) = run_case_b(4, 1.0, omega, 13);
        assert!(!recs.is_empty());
        let want_angle = 2.0 * arg - std::f64::consts::PI;
        for r in &recs {
            assert_eq!(sheet_of(r.k), Sheet::First);
            let cls = classify_sheet(r, omega, 1.0);
            assert_eq!(cls.matches, Some(true), "record at k = {}", r.k);
            let dev = (r.z.arg() - want_angle).abs();
            assert!(dev < 0.25, "z-angle deviation {dev:.3} at k = {}", r.k);
        }
    }
}
