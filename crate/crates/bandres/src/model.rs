//! Channel operators `M`, their spectral data, and the threshold taxonomy.
//!
//! The spectrum of `H0 = Δ ⊗ I + I ⊗ M` is the union of bands
//! `[λ_q, λ_q + 4]` over the eigenvalues of `M`.  Everything downstream
//! (continuation, clusters, counting) consumes the eigenvalues, Riesz
//! projections and multiplicities assembled here, plus the catalog of band
//! edges with their left/right role and degeneracy pairing.

use crate::linalg;
use crate::{c64, tol, C64};
use ndarray::{Array2, Axis};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("channel matrix is not diagonalizable within tolerance (eigenvector condition {cond:.3e})")]
    NonDiagonalizable { cond: f64 },
    #[error("invalid preset parameters: {0}")]
    BadParams(String),
    #[error("channel matrix has non-finite entries or zero dimension")]
    InvalidMatrix,
    #[error("case B spectral data has no zero eigenvalue group")]
    ZeroChannelMissing,
    #[error("threshold {value} pairs with more than one partner channel; refusing to classify")]
    AmbiguousDegeneracy { value: C64 },
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
}

/// Which of the paper's two settings a run lives in: finite-dimensional
/// channel space (`A`) or infinite-dimensional channel space with finite-rank
/// `M`, realized by truncation (`B`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum SpectralCase {
    A,
    B,
}

/// Dense channel operator on the (truncated) space `𝔊`.
#[derive(Debug, Clone)]
pub struct ChannelMatrix {
    pub entries: Array2<C64>,
    /// Finite rank of `M` in case B, when known.
    pub rank_hint: Option<usize>,
}

impl ChannelMatrix {
    pub fn new(entries: Array2<C64>) -> Result<Self, ModelError> {
        if entries.nrows() == 0 || entries.nrows() != entries.ncols() {
            return Err(ModelError::InvalidMatrix);
        }
        if entries.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(ModelError::InvalidMatrix);
        }
        Ok(Self {
            entries,
            rank_hint: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    /// Dirichlet Laplacian strip of width `n`: tridiagonal `2, −1`.
    /// Eigenvalues `4 sin²(jπ / (2(n+1)))`, `j = 1..n`.
    pub fn strip(n: usize) -> Result<Self, ModelError> {
        if n < 1 {
            return Err(ModelError::BadParams("strip width must be >= 1".into()));
        }
        let mut m = Array2::<C64>::zeros((n, n));
        for i in 0..n {
            m[[i, i]] = c64(2.0, 0.0);
            if i + 1 < n {
                m[[i, i + 1]] = c64(-1.0, 0.0);
                m[[i + 1, i]] = c64(-1.0, 0.0);
            }
        }
        Self::new(m)
    }

    /// Rank-`n` strip block embedded in a truncation of `ℓ²(ℤ)` of dimension
    /// `j ≥ n`; the complement is the kernel of `M` (case B).
    pub fn semistrip(n: usize, j: usize) -> Result<Self, ModelError> {
        if n < 1 || j < n {
            return Err(ModelError::BadParams(format!(
                "semistrip needs 1 <= n <= j, got n={n} j={j}"
            )));
        }
        let strip = Self::strip(n)?;
        let mut m = Array2::<C64>::zeros((j, j));
        m.slice_mut(ndarray::s![..n, ..n]).assign(&strip.entries);
        let mut out = Self::new(m)?;
        out.rank_hint = Some(n);
        Ok(out)
    }

    /// Non-Hermitian ring (asymmetric hopping `e^{±g}`) on `ℤ_m`.
    /// Eigenvalues `2 cosh(g + i j 2π/m)`.
    pub fn ring(m: usize, g: f64) -> Result<Self, ModelError> {
        if m < 2 {
            return Err(ModelError::BadParams("ring needs m >= 2".into()));
        }
        let mut a = Array2::<C64>::zeros((m, m));
        for k in 0..m {
            let up = (k + m - 1) % m; // row k−1 gets e^g from column k
            let dn = (k + 1) % m;
            a[[up, k]] += c64(g.exp(), 0.0);
            a[[dn, k]] += c64((-g).exp(), 0.0);
        }
        Self::new(a)
    }

    /// Minimal PT-symmetric two-level system `κσ₁ + iγσ₃` with eigenvalues
    /// `±sqrt(κ² − γ²)`; non-diagonalizable exactly at `κ = γ`.
    pub fn pt2(kappa: f64, gamma: f64) -> Result<Self, ModelError> {
        if kappa < 0.0 || gamma < 0.0 {
            return Err(ModelError::BadParams("pt2 needs kappa, gamma >= 0".into()));
        }
        let m = ndarray::array![
            [c64(0.0, gamma), c64(kappa, 0.0)],
            [c64(kappa, 0.0), c64(0.0, -gamma)]
        ];
        Self::new(m)
    }
}

/// Named preset for configuration files.
#[derive(Debug, Clone)]
pub enum Preset {
    Strip { n: usize },
    Semistrip { n: usize, j: usize },
    Ring { m: usize, g: f64 },
    Pt2 { kappa: f64, gamma: f64 },
}

pub fn preset(p: &Preset) -> Result<ChannelMatrix, ModelError> {
    match *p {
        Preset::Strip { n } => ChannelMatrix::strip(n),
        Preset::Semistrip { n, j } => ChannelMatrix::semistrip(n, j),
        Preset::Ring { m, g } => ChannelMatrix::ring(m, g),
        Preset::Pt2 { kappa, gamma } => ChannelMatrix::pt2(kappa, gamma),
    }
}

/// Eigenvalues, Riesz projections and multiplicities of a channel operator.
///
/// Projections satisfy `π_q² = π_q`, `π_q π_p = 0` for `p ≠ q` and
/// `Σ π_q = I` entrywise within [`tol::PROJECTION`]; `rank π_q = ν_q`.
#[derive(Debug, Clone)]
pub struct ChannelSpectralData {
    pub eigenvalues: Vec<C64>,
    pub projections: Vec<Array2<C64>>,
    pub multiplicities: Vec<usize>,
    /// 2-norm condition number of the eigenvector matrix.
    pub condition: f64,
    /// Index of the zero eigenvalue channel in case B.
    pub zero_channel: Option<usize>,
}

impl ChannelSpectralData {
    pub fn dim(&self) -> usize {
        self.projections.first().map_or(0, |p| p.nrows())
    }

    pub fn n_channels(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Entrywise verification of the projection identities.
    pub fn validate(&self) -> Result<(), ModelError> {
        let d = self.dim();
        let mut sum = Array2::<C64>::zeros((d, d));
        for (q, p) in self.projections.iter().enumerate() {
            let idem = p.dot(p) - p;
            if linalg::max_abs(&idem) > tol::PROJECTION {
                return Err(ModelError::NonDiagonalizable {
                    cond: self.condition,
                });
            }
            for (r, other) in self.projections.iter().enumerate() {
                if r != q {
                    let cross = p.dot(other);
                    if linalg::max_abs(&cross) > tol::PROJECTION {
                        return Err(ModelError::NonDiagonalizable {
                            cond: self.condition,
                        });
                    }
                }
            }
            let tr = linalg::trace(p);
            if (tr - c64(self.multiplicities[q] as f64, 0.0)).norm() > 1e-8 {
                return Err(ModelError::NonDiagonalizable {
                    cond: self.condition,
                });
            }
            sum = sum + p;
        }
        for i in 0..d {
            sum[[i, i]] -= 1.0;
        }
        if linalg::max_abs(&sum) > tol::PROJECTION {
            return Err(ModelError::NonDiagonalizable {
                cond: self.condition,
            });
        }
        Ok(())
    }

    /// Re-labels the eigenvalue group nearest zero as the exact kernel channel
    /// of a finite-rank `M` and replaces its projection by the complement of
    /// the other spectral projections.  Orders the zero channel first.
    pub fn into_case_b(mut self) -> Result<Self, ModelError> {
        let scale = self
            .eigenvalues
            .iter()
            .map(|z| z.norm())
            .fold(1.0f64, f64::max);
        let zero_idx = (0..self.eigenvalues.len())
            .filter(|&i| self.eigenvalues[i].norm() <= 1e-8 * scale)
            .min_by(|&a, &b| {
                self.eigenvalues[a]
                    .norm()
                    .partial_cmp(&self.eigenvalues[b].norm())
                    .unwrap()
            })
            .ok_or(ModelError::ZeroChannelMissing)?;
        let d = self.dim();
        let mut pi0 = Array2::<C64>::eye(d);
        for (i, p) in self.projections.iter().enumerate() {
            if i != zero_idx {
                pi0 = pi0 - p;
            }
        }
        self.eigenvalues[zero_idx] = c64(0.0, 0.0);
        self.projections[zero_idx] = pi0;
        // move the zero channel to the front
        self.eigenvalues.swap(0, zero_idx);
        self.projections.swap(0, zero_idx);
        self.multiplicities.swap(0, zero_idx);
        self.zero_channel = Some(0);
        Ok(self)
    }
}

/// Diagonalizes `M` and assembles grouped spectral data.
///
/// Riesz projections are realized algebraically from the eigenvector matrix:
/// `π_q = V[:, group] · V⁻¹[group, :]`.  Eigenvalues closer than
/// [`tol::EIG_CLUSTER`] (relative) are merged into a single channel.
pub fn diagonalize_channel(m: &ChannelMatrix) -> Result<ChannelSpectralData, ModelError> {
    let (vals, vecs) = linalg::eig(&m.entries)?;
    let cond = linalg::cond2(&vecs)?;
    if !cond.is_finite() || cond > tol::DIAG_COND {
        return Err(ModelError::NonDiagonalizable { cond });
    }
    let vinv = linalg::inv(&vecs)?;
    let d = vals.len();
    let scale = vals.iter().map(|z| z.norm()).fold(1.0f64, f64::max);
    let ctol = tol::EIG_CLUSTER * scale;

    // union-find clustering of eigenvalues
    let mut parent: Vec<usize> = (0..d).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        if parent[i] != i {
            let r = find(parent, parent[i]);
            parent[i] = r;
        }
        parent[i]
    }
    for i in 0..d {
        for j in (i + 1)..d {
            if (vals[i] - vals[j]).norm() <= ctol {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri] = rj;
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..d {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }

    let mut items: Vec<(C64, Array2<C64>, usize)> = Vec::new();
    for group in groups.values() {
        let lambda = group.iter().map(|&i| vals[i]).sum::<C64>() / group.len() as f64;
        let cols = vecs.select(Axis(1), group);
        let rows = vinv.select(Axis(0), group);
        let proj = cols.dot(&rows);
        items.push((lambda, proj, group.len()));
    }
    items.sort_by(|a, b| {
        (a.0.re, a.0.im)
            .partial_cmp(&(b.0.re, b.0.im))
            .expect("finite eigenvalues")
    });

    let data = ChannelSpectralData {
        eigenvalues: items.iter().map(|it| it.0).collect(),
        projections: items.iter().map(|it| it.1.clone()).collect(),
        multiplicities: items.iter().map(|it| it.2).collect(),
        condition: cond,
        zero_channel: None,
    };
    data.validate()?;
    Ok(data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Side {
    Left,
    Right,
}

/// One band edge: its value, which side of which band it is, and the partner
/// channel when the value is simultaneously a left and a right edge.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ThresholdEntry {
    #[serde(serialize_with = "ser_c64")]
    pub value: C64,
    pub side: Side,
    pub channel: usize,
    /// For a left entry `λ_q`: the channel `p` with `λ_q = λ_p + 4`.
    /// For a right entry `λ_p + 4`: the channel `q` with `λ_q = λ_p + 4`.
    pub degenerate_partner: Option<usize>,
    pub case: SpectralCase,
}

fn ser_c64<S: serde::Serializer>(z: &C64, s: S) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(2))?;
    seq.serialize_element(&z.re)?;
    seq.serialize_element(&z.im)?;
    seq.end()
}

impl ThresholdEntry {
    pub fn is_degenerate(&self) -> bool {
        self.degenerate_partner.is_some()
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ThresholdCatalog {
    pub entries: Vec<ThresholdEntry>,
}

impl ThresholdCatalog {
    /// The left entry whose value matches `value` within `tol`.
    pub fn find_left(&self, value: C64, tol: f64) -> Option<&ThresholdEntry> {
        self.entries
            .iter()
            .find(|e| e.side == Side::Left && (e.value - value).norm() <= tol)
    }

    pub fn values(&self) -> Vec<C64> {
        self.entries.iter().map(|e| e.value).collect()
    }
}

/// Lists every band edge `{λ_q, λ_q + 4}` and detects degenerate thresholds:
/// values that are simultaneously a left edge `λ_q` and a right edge
/// `λ_p + 4` (coincidence within [`tol::THRESHOLD_EQ`]).  In case B the
/// kernel channel `λ₀ = 0` participates like any other.
pub fn classify_thresholds(
    s: &ChannelSpectralData,
    case: SpectralCase,
) -> Result<ThresholdCatalog, ModelError> {
    if case == SpectralCase::B && s.zero_channel.is_none() {
        return Err(ModelError::ZeroChannelMissing);
    }
    let lam = &s.eigenvalues;
    let mut entries = Vec::new();
    for (q, &l) in lam.iter().enumerate() {
        // left edge λ_q: degenerate when some λ_p + 4 coincides
        let partners: Vec<usize> = (0..lam.len())
            .filter(|&p| p != q && (lam[p] + 4.0 - l).norm() <= tol::THRESHOLD_EQ)
            .collect();
        if partners.len() > 1 {
            return Err(ModelError::AmbiguousDegeneracy { value: l });
        }
        entries.push(ThresholdEntry {
            value: l,
            side: Side::Left,
            channel: q,
            degenerate_partner: partners.first().copied(),
            case,
        });
        // right edge λ_q + 4: degenerate when it is also some left edge λ_p
        let r = l + 4.0;
        let partners: Vec<usize> = (0..lam.len())
            .filter(|&p| p != q && (lam[p] - r).norm() <= tol::THRESHOLD_EQ)
            .collect();
        if partners.len() > 1 {
            return Err(ModelError::AmbiguousDegeneracy { value: r });
        }
        entries.push(ThresholdEntry {
            value: r,
            side: Side::Right,
            channel: q,
            degenerate_partner: partners.first().copied(),
            case,
        });
    }
    entries.sort_by(|a, b| {
        (a.value.re, a.value.im, a.side == Side::Right, a.channel)
            .partial_cmp(&(b.value.re, b.value.im, b.side == Side::Right, b.channel))
            .expect("finite thresholds")
    });
    Ok(ThresholdCatalog { entries })
}

/// The band `[λ_q, λ_q + 4]` of each channel, for reporting.
pub fn bands(s: &ChannelSpectralData) -> Vec<(C64, C64)> {
    s.eigenvalues.iter().map(|&l| (l, l + 4.0)).collect()
}

/// Reflection `J Δ J⁻¹ = −Δ + 4` with `(Jφ)(n) = (−1)ⁿ φ(n)`.
///
/// Conjugating `H_ω − z` by `J ⊗ I` and negating maps the analysis near a
/// right threshold `λ_q + 4` of `H_ω = Δ⊗I + I⊗M + ωV` to the analysis near
/// the left threshold `−λ_q` of the reflected family
/// `Δ⊗I + I⊗(−M) + ω·(−JVJ)`, with spectral parameter `z ↦ 4 − z`.
pub mod reflect {
    use super::*;

    /// Channel operator of the reflected problem: `−M`.
    pub fn channel(m: &ChannelMatrix) -> ChannelMatrix {
        ChannelMatrix {
            entries: m.entries.mapv(|z| -z),
            rank_hint: m.rank_hint,
        }
    }

    /// Spectral data of the reflected problem (projections unchanged).
    pub fn spectral(s: &ChannelSpectralData) -> ChannelSpectralData {
        let mut out = s.clone();
        for l in out.eigenvalues.iter_mut() {
            *l = -*l;
        }
        out
    }

    /// Spectral parameter map, both directions.
    pub fn z(z: C64) -> C64 {
        c64(4.0, 0.0) - z
    }

    /// Sign picked up by the site block of the reflected perturbation
    /// `−J V J` at the pair `(n, m)`.
    pub fn block_sign(n: i64, m: i64) -> f64 {
        if (n + m).rem_euclid(2) == 0 {
            -1.0
        } else {
            1.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs;

    fn new_data(m: &ChannelMatrix) -> ChannelSpectralData {
        diagonalize_channel(m).expect("diagonalizable")
    }

    #[test]
    fn strip_two_channels() {
        // 4 sin²(π/6) = 1, 4 sin²(π/3) = 3
        let s = new_data(&ChannelMatrix::strip(2).unwrap());
        assert_eq!(s.eigenvalues.len(), 2);
        assert!((s.eigenvalues[0] - 1.0).norm() < 1e-10);
        assert!((s.eigenvalues[1] - 3.0).norm() < 1e-10);
        assert_eq!(s.multiplicities, vec![1, 1]);
    }

    #[test]
    fn strip_matches_closed_form() {
        for n in [1usize, 3, 5, 8] {
            let s = new_data(&ChannelMatrix::strip(n).unwrap());
            let mut expect: Vec<f64> = (1..=n)
                .map(|j| {
                    let t = (j as f64) * std::f64::consts::PI / (2.0 * (n as f64 + 1.0));
                    4.0 * t.sin().powi(2)
                })
                .collect();
            expect.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (got, want) in s.eigenvalues.iter().zip(expect) {
                assert!((got - want).norm() < 1e-10 * want.max(1.0));
                assert!(want > 0.0 && want < 4.0, "Dirichlet box spectrum inside (0,4)");
            }
        }
    }

    #[test]
    fn pt_eigenvalues_and_skew_projections() {
        // ±sqrt(κ² − γ²) = ±√3 at κ=2, γ=1
        let s = new_data(&ChannelMatrix::pt2(2.0, 1.0).unwrap());
        let r = 3.0f64.sqrt();
        assert!((s.eigenvalues[0] + r).norm() < 1e-10);
        assert!((s.eigenvalues[1] - r).norm() < 1e-10);
        // eigenprojections are not orthogonal (π ≠ π†)
        let dev = crate::linalg::hermitian_defect(&s.projections[0]);
        assert!(dev > 1e-3, "PT projections should be skew, defect {dev}");
        s.validate().unwrap();
    }

    #[test]
    fn pt_broken_symmetry_is_rejected() {
        let err = diagonalize_channel(&ChannelMatrix::pt2(1.0, 1.0).unwrap()).unwrap_err();
        match err {
            ModelError::NonDiagonalizable { cond } => assert!(cond > tol::DIAG_COND),
            other => panic!("expected NonDiagonalizable, got {other}"),
        }
    }

    #[test]
    fn ring_multiplicity() {
        // m=4, g=0: eigenvalues 2cos(jπ/2) = {2, 0, −2} with ν(0) = 2
        let s = new_data(&ChannelMatrix::ring(4, 0.0).unwrap());
        assert_eq!(s.eigenvalues.len(), 3);
        assert!((s.eigenvalues[0] + 2.0).norm() < 1e-9);
        assert!(s.eigenvalues[1].norm() < 1e-9);
        assert!((s.eigenvalues[2] - 2.0).norm() < 1e-9);
        assert_eq!(s.multiplicities, vec![1, 2, 1]);
    }

    #[test]
    fn ring_complex_spectrum() {
        let (m, g) = (3usize, 0.5f64);
        let s = new_data(&ChannelMatrix::ring(m, g).unwrap());
        let theta = 2.0 * std::f64::consts::PI / m as f64;
        let mut expect: Vec<C64> = (0..m)
            .map(|j| {
                let t = j as f64 * theta;
                c64(2.0 * g.cosh() * t.cos(), 2.0 * g.sinh() * t.sin())
            })
            .collect();
        expect.sort_by(|a, b| (a.re, a.im).partial_cmp(&(b.re, b.im)).unwrap());
        for (got, want) in s.eigenvalues.iter().zip(expect) {
            assert!((got - want).norm() < 1e-9);
        }
    }

    #[test]
    fn semistrip_truncation() {
        let m = ChannelMatrix::semistrip(2, 20).unwrap();
        let s = new_data(&m).into_case_b().unwrap();
        assert_eq!(s.zero_channel, Some(0));
        assert!(s.eigenvalues[0].norm() == 0.0);
        assert_eq!(s.multiplicities[0], 18);
        let nonzero: usize = s.multiplicities[1..].iter().sum();
        assert_eq!(nonzero, 2);
        s.validate().unwrap();
        // rank bookkeeping: Σ ν_q equals the truncation dimension
        let total: usize = s.multiplicities.iter().sum();
        assert_eq!(total, 20);
    }

    #[test]
    fn multiplicities_sum_to_dimension() {
        for m in [
            ChannelMatrix::strip(4).unwrap(),
            ChannelMatrix::ring(5, 0.3).unwrap(),
            ChannelMatrix::pt2(2.0, 0.5).unwrap(),
        ] {
            let s = new_data(&m);
            let total: usize = s.multiplicities.iter().sum();
            assert_eq!(total, m.dim());
        }
    }

    #[test]
    fn degenerate_threshold_detected() {
        let m = ChannelMatrix::new(ndarray::array![
            [c64(0.0, 0.0), c64(0.0, 0.0)],
            [c64(0.0, 0.0), c64(4.0, 0.0)]
        ])
        .unwrap();
        let s = new_data(&m);
        let cat = classify_thresholds(&s, SpectralCase::A).unwrap();
        let left4 = cat.find_left(c64(4.0, 0.0), 1e-12).unwrap();
        assert_eq!(left4.degenerate_partner, Some(0), "4 = 0 + 4");
        // and the matching right entry of channel 0 points back at channel 1
        let right4 = cat
            .entries
            .iter()
            .find(|e| e.side == Side::Right && (e.value - 4.0).norm() < 1e-12)
            .unwrap();
        assert_eq!(right4.channel, 0);
        assert_eq!(right4.degenerate_partner, Some(1));
    }

    #[test]
    fn strip_thresholds_not_degenerate() {
        let s = new_data(&ChannelMatrix::strip(2).unwrap());
        let cat = classify_thresholds(&s, SpectralCase::A).unwrap();
        let vals: Vec<f64> = cat.entries.iter().map(|e| e.value.re).collect();
        for (got, want) in vals.iter().zip([1.0, 3.0, 5.0, 7.0]) {
            assert!((got - want).abs() < 1e-10);
        }
        assert!(cat.entries.iter().all(|e| !e.is_degenerate()));
    }

    #[test]
    fn case_b_rank_one_catalog() {
        // rank-1 M with λ1 = 2 in a dim-6 truncation: thresholds {0, 2, 4, 6}.
        let mut m = Array2::<C64>::zeros((6, 6));
        m[[0, 0]] = c64(2.0, 0.0);
        let s = new_data(&ChannelMatrix::new(m).unwrap())
            .into_case_b()
            .unwrap();
        let cat = classify_thresholds(&s, SpectralCase::B).unwrap();
        let mut vals: Vec<f64> = cat.entries.iter().map(|e| e.value.re).collect();
        vals.dedup();
        assert_eq!(vals, vec![0.0, 2.0, 4.0, 6.0]);
        // 4 = λ₀ + 4 is a right edge only: no eigenvalue equals 4, so the
        // strict coincidence rule λ_q = λ_p + 4 leaves it non-degenerate.
        let right4 = cat
            .entries
            .iter()
            .find(|e| (e.value - 4.0).norm() < 1e-12)
            .unwrap();
        assert_eq!(right4.side, Side::Right);
        assert_eq!(right4.channel, 0);
        assert!(!right4.is_degenerate());
    }

    #[test]
    fn reflection_stencil_identity() {
        // J (Δ-stencil) J = stencil of −Δ + 4 on a finite box
        let l = 12i64;
        let n = (2 * l + 1) as usize;
        let mut delta = Array2::<C64>::zeros((n, n));
        for i in 0..n {
            delta[[i, i]] = c64(2.0, 0.0);
            if i + 1 < n {
                delta[[i, i + 1]] = c64(-1.0, 0.0);
                delta[[i + 1, i]] = c64(-1.0, 0.0);
            }
        }
        let mut conj = Array2::<C64>::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                let si = if (i as i64 - l).rem_euclid(2) == 0 { 1.0 } else { -1.0 };
                let sj = if (j as i64 - l).rem_euclid(2) == 0 { 1.0 } else { -1.0 };
                conj[[i, j]] = delta[[i, j]] * si * sj;
            }
        }
        let mut expect = delta.mapv(|z| -z);
        for i in 0..n {
            expect[[i, i]] += 4.0;
        }
        assert!(max_abs(&(&conj - &expect)) < 1e-14);
    }

    #[test]
    fn reflection_threshold_map() {
        // threshold 4 of the free Δ (λ = 0) maps to threshold 0
        assert_eq!(reflect::z(c64(4.0, 0.0)), c64(0.0, 0.0));
        let m = ChannelMatrix::strip(2).unwrap();
        let s = new_data(&m);
        let rs = reflect::spectral(&s);
        assert!((rs.eigenvalues[0] + s.eigenvalues[0]).norm() < 1e-15);
    }
}
