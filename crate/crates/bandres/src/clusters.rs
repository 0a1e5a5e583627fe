//! Effective matrices on the threshold subspace and the cluster law for the
//! resonances near a non-accumulating threshold.
//!
//! The rank-`ν_q` projector `Π_q = |w⟩⟨w| ⊗ π_q` (with `w` the unit weight
//! sequence) carries the effective matrix `E_q = Π_q V_ρ Π_q`.  For small
//! `|ω|` the resonances near `λ_q` form clusters in the `k`-plane around
//! `−(i/2) α_j ω` for each eigenvalue `α_j` of `E_q` restricted to `Ran Π_q`,
//! with at most `m_j` (exactly `m_j` in the selfadjoint case) resonances in
//! the cluster of an `m_j`-fold `α_j`, at distance `O(|ω|^{1+1/m_j})`.
//! At a degenerate threshold the projector gains the partner block
//! `|w̃⟩⟨w̃| ⊗ π_p` (`w̃(n) = (−1)ⁿ w(n)`), the effective matrix becomes
//! `E_{q,p} = Π_{q,p} V_ρ (a₋₁⊗π_q + b₋₁⊗π_p)` and the centers are `−β_j ω`.

use crate::charval::ResonanceRecord;
use crate::freeres::WeightScheme;
use crate::linalg::{self, LinalgError};
use crate::model::{ChannelSpectralData, Side, ThresholdEntry};
use crate::perturbation::{PerturbationError, PotentialSpec};
use crate::{c64, tol, C64, I};
use ndarray::{Array1, Array2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("|ω| = {omega:.3e} too large: predicted cluster disks overlap (needed < {bound:.3e})")]
    OmegaTooLarge { omega: f64, bound: f64 },
    #[error("threshold entry must be a left edge")]
    NotLeftEdge,
    #[error("coupling ω = 0 admits no cluster prediction")]
    ZeroOmega,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Perturbation(#[from] PerturbationError),
}

/// Orthonormal basis of `Ran π` from the SVD of the (possibly skew)
/// projection: the `rank` left singular vectors with σ ≈ 1 or larger.
fn range_basis(pi: &Array2<C64>) -> Result<Vec<Array1<C64>>, ClusterError> {
    let (u, sv, _) = linalg::svd_full(pi)?;
    let mut cols = Vec::new();
    for (i, &s) in sv.iter().enumerate() {
        if s > 0.5 {
            cols.push(u.column(i).to_owned());
        }
    }
    Ok(cols)
}

/// `Π_q` (or `Π_{q,p}` at a degenerate threshold) as a dense matrix on the
/// box; idempotent of rank `ν_q` (resp. `ν_q + ν_p`).
pub fn build_projector(
    s: &ChannelSpectralData,
    entry: &ThresholdEntry,
    w: &WeightScheme,
) -> Result<Array2<C64>, ClusterError> {
    if entry.side != Side::Left {
        return Err(ClusterError::NotLeftEdge);
    }
    let g = s.dim();
    let sites = w.sites();
    let n = sites.len() * g;
    let mut out = Array2::<C64>::zeros((n, n));
    let mut add_block = |weight: &dyn Fn(i64) -> f64, pi: &Array2<C64>| {
        for (i, &ni) in sites.iter().enumerate() {
            for (j, &mj) in sites.iter().enumerate() {
                let ww = weight(ni) * weight(mj);
                for g1 in 0..g {
                    for g2 in 0..g {
                        out[[i * g + g1, j * g + g2]] += ww * pi[[g1, g2]];
                    }
                }
            }
        }
    };
    let wm = |n: i64| w.w_minus(n);
    add_block(&wm, &s.projections[entry.channel]);
    if let Some(p) = entry.degenerate_partner {
        let wt = |n: i64| {
            let sgn = if n.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
            sgn * w.w_minus(n)
        };
        add_block(&wt, &s.projections[p]);
    }
    Ok(out)
}

/// The effective matrix restricted to `Ran Π`, together with its clustered
/// eigenvalues.
#[derive(Debug, Clone)]
pub struct EffectiveMatrix {
    /// Coordinate matrix in the chosen basis of `Ran Π`.
    pub matrix: Array2<C64>,
    /// Distinct eigenvalues `α_j` (or `β_j`) with multiplicities `m_j`.
    pub eigs: Vec<(C64, usize)>,
    pub degenerate: bool,
    /// `ν_q` (resp. `ν_q + ν_p`): the total multiplicity budget.
    pub nu: usize,
}

struct HatMaps<'a> {
    w: &'a WeightScheme,
    sites: Vec<i64>,
    g: usize,
}

impl HatMaps<'_> {
    /// `⟨w ⊗ e_g, v⟩` over sites.
    fn hat_w(&self, v: &Array1<C64>) -> Array1<C64> {
        let mut out = Array1::<C64>::zeros(self.g);
        for (i, &n) in self.sites.iter().enumerate() {
            let wn = self.w.w_minus(n);
            for g1 in 0..self.g {
                out[g1] += wn * v[i * self.g + g1];
            }
        }
        out
    }

    fn hat_wt(&self, v: &Array1<C64>) -> Array1<C64> {
        let mut out = Array1::<C64>::zeros(self.g);
        for (i, &n) in self.sites.iter().enumerate() {
            let sgn = if n.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
            let wn = sgn * self.w.w_minus(n);
            for g1 in 0..self.g {
                out[g1] += wn * v[i * self.g + g1];
            }
        }
        out
    }

    fn lift_w(&self, x: &Array1<C64>) -> Array1<C64> {
        let mut out = Array1::<C64>::zeros(self.sites.len() * self.g);
        for (i, &n) in self.sites.iter().enumerate() {
            let wn = self.w.w_minus(n);
            for g1 in 0..self.g {
                out[i * self.g + g1] = wn * x[g1];
            }
        }
        out
    }

    fn lift_wt(&self, x: &Array1<C64>) -> Array1<C64> {
        let mut out = Array1::<C64>::zeros(self.sites.len() * self.g);
        for (i, &n) in self.sites.iter().enumerate() {
            let sgn = if n.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
            let wn = sgn * self.w.w_minus(n);
            for g1 in 0..self.g {
                out[i * self.g + g1] = wn * x[g1];
            }
        }
        out
    }
}

/// Builds `E_q` (or `E_{q,p}`) restricted to `Ran Π` and extracts its
/// eigenvalue clusters.
pub fn build_effective_matrix(
    s: &ChannelSpectralData,
    entry: &ThresholdEntry,
    pot: &PotentialSpec,
    w: &WeightScheme,
) -> Result<EffectiveMatrix, ClusterError> {
    if entry.side != Side::Left {
        return Err(ClusterError::NotLeftEdge);
    }
    let g = s.dim();
    let sites = w.sites();
    let maps = HatMaps {
        w,
        sites: sites.clone(),
        g,
    };
    let q = entry.channel;
    let pi_q = &s.projections[q];
    let basis_q = range_basis(pi_q)?;
    let mut basis: Vec<Array1<C64>> = basis_q.iter().map(|x| maps.lift_w(x)).collect();
    let degenerate = entry.degenerate_partner.is_some();
    if let Some(p) = entry.degenerate_partner {
        for y in range_basis(&s.projections[p])? {
            basis.push(maps.lift_wt(&y));
        }
    }
    let nu = basis.len();

    let v_rho = pot.v_rho_matrix(w, &sites)?;
    let apply_pi = |v: &Array1<C64>| -> Array1<C64> {
        let mut out = maps.lift_w(&pi_q.dot(&maps.hat_w(v)));
        if let Some(p) = entry.degenerate_partner {
            out = out + maps.lift_wt(&s.projections[p].dot(&maps.hat_wt(v)));
        }
        out
    };
    // the operator applied to basis columns
    let applied: Vec<Array1<C64>> = basis
        .iter()
        .map(|u| {
            let pre = if degenerate {
                // (a₋₁ ⊗ π_q + b₋₁ ⊗ π_p) u
                let mut x = maps.lift_w(&pi_q.dot(&maps.hat_w(u))).mapv(|z| z * (I / 2.0));
                let p = entry.degenerate_partner.expect("degenerate");
                let y = maps
                    .lift_wt(&s.projections[p].dot(&maps.hat_wt(u)))
                    .mapv(|z| z * c64(-0.5, 0.0));
                x = x + y;
                x
            } else {
                u.clone()
            };
            apply_pi(&v_rho.dot(&pre))
        })
        .collect();

    // coordinates through the basis Gram matrix (the two blocks are not
    // orthogonal for skew channel projections)
    let mut gram = Array2::<C64>::zeros((nu, nu));
    let mut rhs = Array2::<C64>::zeros((nu, nu));
    for i in 0..nu {
        for j in 0..nu {
            gram[[i, j]] = basis[i].mapv(|z| z.conj()).dot(&basis[j]);
            rhs[[i, j]] = basis[i].mapv(|z| z.conj()).dot(&applied[j]);
        }
    }
    let matrix = linalg::solve_matrix(&gram, &rhs)?;

    let (vals, _) = linalg::eig(&matrix)?;
    let scale = vals.iter().map(|v| v.norm()).fold(1e-300, f64::max);
    let mut sorted: Vec<C64> = vals.to_vec();
    sorted.sort_by(|a, b| (a.re, a.im).partial_cmp(&(b.re, b.im)).unwrap());
    let mut eigs: Vec<(C64, usize)> = Vec::new();
    for v in sorted {
        match eigs.last_mut() {
            Some((rep, m)) if (v - *rep).norm() <= tol::ALPHA_CLUSTER * scale => {
                *rep = (*rep * c64(*m as f64, 0.0) + v) / c64((*m + 1) as f64, 0.0);
                *m += 1;
            }
            _ => eigs.push((v, 1)),
        }
    }

    Ok(EffectiveMatrix {
        matrix,
        eigs,
        degenerate,
        nu,
    })
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct Cluster {
    #[serde(serialize_with = "crate::charval::ser_c64")]
    pub alpha: C64,
    pub mult: usize,
    #[serde(serialize_with = "crate::charval::ser_c64")]
    pub center: C64,
    pub radius: f64,
}

/// Predicted cluster geometry at a given coupling.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ClusterPrediction {
    pub clusters: Vec<Cluster>,
    #[serde(serialize_with = "crate::charval::ser_c64")]
    pub omega: C64,
    pub degenerate: bool,
    pub radius_constant: f64,
    pub expected_total: usize,
}

/// Centers `−(i/2) α_j ω` (degenerate: `−β_j ω`) with radii
/// `C |ω|^{1+1/m_j}`; fails when the disks are not pairwise disjoint or
/// would swallow the threshold at `k = 0`.
pub fn predict_clusters(
    e: &EffectiveMatrix,
    omega: C64,
    radius_constant: f64,
) -> Result<ClusterPrediction, ClusterError> {
    if omega.norm() == 0.0 {
        return Err(ClusterError::ZeroOmega);
    }
    let aw = omega.norm();
    let clusters: Vec<Cluster> = e
        .eigs
        .iter()
        .map(|&(alpha, m)| {
            let center = if e.degenerate {
                -alpha * omega
            } else {
                -I / 2.0 * alpha * omega
            };
            Cluster {
                alpha,
                mult: m,
                center,
                radius: radius_constant * aw.powf(1.0 + 1.0 / m as f64),
            }
        })
        .collect();
    // disjointness of the predicted disks, and clearance from k = 0
    for (i, a) in clusters.iter().enumerate() {
        if a.alpha.norm() > 0.0 && a.radius >= 0.9 * a.center.norm() {
            let bound = (0.9 * a.center.norm() / radius_constant)
                .powf(1.0 / (1.0 + 1.0 / a.mult as f64));
            return Err(ClusterError::OmegaTooLarge { omega: aw, bound });
        }
        for b in clusters.iter().skip(i + 1) {
            let gap = (a.center - b.center).norm();
            if a.radius + b.radius >= 0.5 * gap {
                let bound = aw * (0.5 * gap / (a.radius + b.radius)).min(1.0);
                return Err(ClusterError::OmegaTooLarge { omega: aw, bound });
            }
        }
    }
    Ok(ClusterPrediction {
        clusters,
        omega,
        degenerate: e.degenerate,
        radius_constant,
        expected_total: e.nu,
    })
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ClusterCheck {
    pub cluster: usize,
    /// Resonances assigned to this cluster, counted with multiplicity.
    pub count: usize,
    pub expected_mult: usize,
    pub max_center_dist: f64,
    pub radius: f64,
    pub contained: bool,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ClusterReport {
    pub per_cluster: Vec<ClusterCheck>,
    pub total_mult: usize,
    pub expected_total: usize,
    /// Every cluster holds between 1 and `m_j` resonances.
    pub counts_within_bounds: bool,
    /// Total multiplicity equals `ν_q` (must hold in the selfadjoint case).
    pub total_matches: bool,
    pub all_contained: bool,
}

/// Assigns each record to the nearest predicted center and checks the
/// counting and containment laws.
pub fn verify_clusters(records: &mut [ResonanceRecord], pred: &ClusterPrediction) -> ClusterReport {
    let mut checks: Vec<ClusterCheck> = pred
        .clusters
        .iter()
        .enumerate()
        .map(|(i, c)| ClusterCheck {
            cluster: i,
            count: 0,
            expected_mult: c.mult,
            max_center_dist: 0.0,
            radius: c.radius,
            contained: true,
        })
        .collect();
    for rec in records.iter_mut() {
        let (best, dist) = pred
            .clusters
            .iter()
            .enumerate()
            .map(|(i, c)| (i, (rec.k - c.center).norm()))
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .expect("at least one cluster");
        rec.cluster_id = Some(best);
        checks[best].count += rec.mult_index;
        checks[best].max_center_dist = checks[best].max_center_dist.max(dist);
        if dist > checks[best].radius {
            checks[best].contained = false;
        }
    }
    let total_mult: usize = checks.iter().map(|c| c.count).sum();
    let counts_within_bounds = checks
        .iter()
        .all(|c| c.count >= 1 && c.count <= c.expected_mult);
    ClusterReport {
        total_mult,
        expected_total: pred.expected_total,
        counts_within_bounds,
        total_matches: total_mult == pred.expected_total,
        all_contained: checks.iter().all(|c| c.contained),
        per_cluster: checks,
    }
}

/// Least-squares slope of `log err` against `log |ω|`; the cluster law
/// predicts `1 + 1/m` for the center error of an `m`-fold cluster.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (lx, ly) = (x.ln(), y.max(1e-300).ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::charval::{certify_records, locate_characteristic_values, LocateOptions};
    use crate::freeres::{assemble_continued_resolvent, AssembleOptions};
    use crate::linalg::{max_abs, rank_rel, svdvals};
    use crate::model::{classify_thresholds, diagonalize_channel, ChannelMatrix, SpectralCase};
    use crate::perturbation::{birman_schwinger, rank_one_pair};

    fn strip_data() -> (ChannelSpectralData, ThresholdEntry, WeightScheme) {
        let m = ChannelMatrix::strip(2).unwrap();
        let s = diagonalize_channel(&m).unwrap();
        let cat = classify_thresholds(&s, SpectralCase::A).unwrap();
        let entry = cat.find_left(c64(1.0, 0.0), 1e-9).unwrap().clone();
        let w = WeightScheme::new(1.0, 30).unwrap();
        (s, entry, w)
    }

    #[test]
    fn projector_idempotent_and_rank() {
        let (s, entry, w) = strip_data();
        let pi = build_projector(&s, &entry, &w).unwrap();
        let sq = pi.dot(&pi);
        assert!(max_abs(&(&sq - &pi)) < 1e-10);
        let sv = svdvals(&pi).unwrap();
        assert_eq!(rank_rel(&sv, 1e-9), 1);
    }

    #[test]
    fn degenerate_projector_rank_two() {
        let m = ChannelMatrix::new(ndarray::array![
            [c64(0.0, 0.0), c64(0.0, 0.0)],
            [c64(0.0, 0.0), c64(4.0, 0.0)]
        ])
        .unwrap();
        let s = diagonalize_channel(&m).unwrap();
        let cat = classify_thresholds(&s, SpectralCase::A).unwrap();
        let entry = cat.find_left(c64(4.0, 0.0), 1e-9).unwrap().clone();
        let w = WeightScheme::new(1.0, 30).unwrap();
        let pi = build_projector(&s, &entry, &w).unwrap();
        let sq = pi.dot(&pi);
        assert!(max_abs(&(&sq - &pi)) < 1e-10);
        let sv = svdvals(&pi).unwrap();
        assert_eq!(rank_rel(&sv, 1e-9), 2);
    }

    #[test]
    fn rank_one_effective_value() {
        // V = |δ₀⟩⟨δ₀| ⊗ |e₁⟩⟨e₁| at λ = 1: α = |⟨v₁, e₁⟩|² = 1/2
        let (s, entry, w) = strip_data();
        let pot = PotentialSpec::case_a(
            vec![rank_one_pair(0, 0, 0, 0, c64(1.0, 0.0), 2)],
            1.0,
            1.0,
        )
        .unwrap();
        let e = build_effective_matrix(&s, &entry, &pot, &w).unwrap();
        assert_eq!(e.nu, 1);
        assert_eq!(e.eigs.len(), 1);
        assert!(
            (e.eigs[0].0 - 0.5).norm() < 1e-10,
            "α = {} should be 1/2",
            e.eigs[0].0
        );
    }

    #[test]
    fn selfadjoint_effective_matrix_real_spectrum() {
        // M = diag(1,1,3), V selfadjoint coupling the ν = 2 eigenspace
        let mut mm = Array2::<C64>::zeros((3, 3));
        mm[[0, 0]] = c64(1.0, 0.0);
        mm[[1, 1]] = c64(1.0, 0.0);
        mm[[2, 2]] = c64(3.0, 0.0);
        let s = diagonalize_channel(&ChannelMatrix::new(mm).unwrap()).unwrap();
        let cat = classify_thresholds(&s, SpectralCase::A).unwrap();
        let entry = cat.find_left(c64(1.0, 0.0), 1e-9).unwrap().clone();
        let w = WeightScheme::new(1.0, 30).unwrap();
        let mut block = Array2::<C64>::zeros((3, 3));
        block[[0, 0]] = c64(0.75, 0.0);
        block[[0, 1]] = c64(0.25, 0.0);
        block[[1, 0]] = c64(0.25, 0.0);
        block[[1, 1]] = c64(0.75, 0.0);
        block[[2, 2]] = c64(0.3, 0.0);
        let pot = PotentialSpec::case_a(
            vec![crate::perturbation::SitePair {
                n: 0,
                m: 0,
                block,
            }],
            1.0,
            1.0,
        )
        .unwrap();
        let e = build_effective_matrix(&s, &entry, &pot, &w).unwrap();
        assert_eq!(e.nu, 2);
        let mut alphas: Vec<C64> = e.eigs.iter().map(|x| x.0).collect();
        alphas.sort_by(|a, b| a.re.partial_cmp(&b.re).unwrap());
        assert!(alphas.iter().all(|a| a.im.abs() < 1e-10));
        assert!((alphas[0] - 0.5).norm() < 1e-9);
        assert!((alphas[1] - 1.0).norm() < 1e-9);
    }

    #[test]
    fn prediction_formula_and_failure_modes() {
        let e = EffectiveMatrix {
            matrix: Array2::eye(1),
            eigs: vec![(c64(0.5, 0.0), 1)],
            degenerate: false,
            nu: 1,
        };
        let pred = predict_clusters(&e, c64(0.01, 0.0), 1.0).unwrap();
        assert!((pred.clusters[0].center - c64(0.0, -0.0025)).norm() < 1e-15);
        assert!((pred.clusters[0].radius - 1e-4).abs() < 1e-12);
        assert!(matches!(
            predict_clusters(&e, c64(0.0, 0.0), 1.0),
            Err(ClusterError::ZeroOmega)
        ));
        // symmetric ± pair of α's maps to symmetric centers
        let e2 = EffectiveMatrix {
            matrix: Array2::eye(2),
            eigs: vec![(c64(-0.7, 0.0), 1), (c64(0.7, 0.0), 1)],
            degenerate: false,
            nu: 2,
        };
        let pred = predict_clusters(&e2, c64(0.01, 0.0), 1.0).unwrap();
        assert!((pred.clusters[0].center + pred.clusters[1].center).norm() < 1e-15);
        // too-large ω overlaps the disks
        assert!(matches!(
            predict_clusters(&e2, c64(0.9, 0.0), 1.0),
            Err(ClusterError::OmegaTooLarge { .. })
        ));
    }

    #[test]
    fn end_to_end_rank_one_cluster() {
        let (s, entry, w) = strip_data();
        let pot = PotentialSpec::case_a(
            vec![rank_one_pair(0, 0, 0, 0, c64(1.0, 0.0), 2)],
            1.0,
            1.0,
        )
        .unwrap();
        let e = build_effective_matrix(&s, &entry, &pot, &w).unwrap();
        let res =
            assemble_continued_resolvent(&s, &entry, &w, &AssembleOptions::default()).unwrap();
        let omega = c64(0.01, 0.0);
        let pred = predict_clusters(&e, omega, 1.0).unwrap();
        let fam = birman_schwinger(&pot, &res, omega).unwrap();
        let radius = res.eps0 * omega.norm();
        let opts = LocateOptions::for_region(res.eps0, radius, 17);
        let zeros = locate_characteristic_values(&fam, radius, &opts).unwrap();
        let mut recs = certify_records(&fam, &zeros, opts.inner_radius, omega, 0).unwrap();
        let report = verify_clusters(&mut recs, &pred);
        assert_eq!(report.total_mult, 1);
        assert!(report.total_matches);
        assert!(report.counts_within_bounds);
        assert!(report.all_contained, "{report:?}");
        assert_eq!(recs[0].cluster_id, Some(0));
    }

    #[test]
    fn center_error_order_two_point_check() {
        // the center error −(i/2)αω − k(ω) shrinks at order |ω|² for m = 1
        let (s, entry, w) = strip_data();
        let pot = PotentialSpec::case_a(
            vec![rank_one_pair(0, 0, 0, 0, c64(1.0, 0.0), 2)],
            1.0,
            1.0,
        )
        .unwrap();
        let e = build_effective_matrix(&s, &entry, &pot, &w).unwrap();
        let res =
            assemble_continued_resolvent(&s, &entry, &w, &AssembleOptions::default()).unwrap();
        let err_at = |om: f64| -> f64 {
            let omega = c64(om, 0.0);
            let fam = birman_schwinger(&pot, &res, omega).unwrap();
            let radius = res.eps0 * om;
            let opts = LocateOptions::for_region(res.eps0, radius, 3);
            let zeros = locate_characteristic_values(&fam, radius, &opts).unwrap();
            assert_eq!(zeros.len(), 1);
            let center = predict_clusters(&e, omega, 1.0).unwrap().clusters[0].center;
            (zeros[0].0 - center).norm()
        };
        let e1 = err_at(0.02);
        let e2 = err_at(0.01);
        // order 1 + 1/m = 2: halving ω shrinks the error by ≥ 2^2·(1−slack)
        assert!(
            e1 / e2 > 4.0 * 0.8,
            "two-point order check failed: {e1:.3e} vs {e2:.3e}"
        );
        let slope = log_log_slope(&[(0.02, e1), (0.01, e2)]);
        assert!((slope - 2.0).abs() < 0.4, "slope {slope}");
    }
}
