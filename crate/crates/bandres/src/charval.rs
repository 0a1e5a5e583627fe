//! Characteristic-value engine.
//!
//! Resonances are the characteristic values of the analytic family
//! `F(k) = I + 𝒫_ω(z_q(k))`.  This module locates them with the argument
//! principle — the index `(1/2πi) ∮ Tr(F′F⁻¹) dk` counts characteristic
//! values with multiplicity — and certifies every zero twice: once through
//! that contour index and once through the rank of the residue
//! `(1/2πi) ∮ 𝓡_ω(k) dk` of the perturbed resolvent.
//!
//! The search region is the punctured disk around the threshold.  It is
//! explored as an annulus in log-polar coordinates, quadrisected until each
//! cell holds a single simple zero (polished by Newton on `log det F` with
//! deflation) or shrinks below the resolution at which a multiple zero is
//! reported by its centroid.

use crate::freeres::FreeresError;
use crate::linalg::{self, LinalgError};
use crate::perturbation::BirmanSchwinger;
use crate::{c64, tol, C64, I};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::LazyLock;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CharvalError {
    #[error("contour quadrature did not converge: {0}")]
    NotConverged(String),
    #[error("family is numerically singular on the contour at k = {k} (σ_min ratio {ratio:.3e})")]
    SingularOnContour { k: C64, ratio: f64 },
    #[error("a zero sits within guard distance of a cell edge")]
    BoundaryZero,
    #[error("residue rank ambiguous: σ = {sigma:.3e} within a factor 10 of cutoff {cutoff:.3e}")]
    RankAmbiguous { sigma: f64, cutoff: f64 },
    #[error("perturbed resolvent at a pole (condition {cond:.3e})")]
    AtPole { cond: f64 },
    #[error(transparent)]
    Freeres(#[from] FreeresError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Analytic matrix family with derivative, the input of the engine.
pub trait AnalyticFamily {
    fn dim(&self) -> usize;
    fn eval(&self, k: C64) -> Result<Array2<C64>, CharvalError>;
    fn eval_with_deriv(&self, k: C64) -> Result<(Array2<C64>, Array2<C64>), CharvalError>;
}

/// Positively oriented circle.
#[derive(Debug, Clone)]
pub struct ContourSpec {
    pub center: C64,
    pub radius: f64,
    /// Starting node count (power of two); doubled adaptively.
    pub nodes: usize,
}

impl ContourSpec {
    pub fn new(center: C64, radius: f64) -> Self {
        Self {
            center,
            radius,
            nodes: 16,
        }
    }
}

/// Raw index value before integer snapping, kept for integer-certificate
/// reporting.
#[derive(Debug, Clone, Copy)]
pub struct IndexResult {
    pub value: i64,
    pub raw: C64,
}

impl IndexResult {
    pub fn integer_defect(&self) -> f64 {
        (self.raw - c64(self.value as f64, 0.0)).norm()
    }
}

fn trace_logdet_deriv(f: &dyn AnalyticFamily, k: C64, guard: f64) -> Result<C64, CharvalError> {
    let (fv, fd) = f.eval_with_deriv(k)?;
    let sv = linalg::svdvals(&fv)?;
    let smax = sv.iter().cloned().fold(0.0f64, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(smin / smax.max(1e-300)).is_finite() || smin / smax.max(1e-300) < guard {
        return Err(CharvalError::SingularOnContour {
            k,
            ratio: smin / smax.max(1e-300),
        });
    }
    let finv = linalg::inv(&fv)?;
    Ok(linalg::trace(&finv.dot(&fd)))
}

/// Index and first moment over a circle by the trapezoid rule with node
/// doubling; spectrally accurate for the periodic integrand.
fn circle_index_moment(
    f: &dyn AnalyticFamily,
    gamma: &ContourSpec,
    guard: f64,
) -> Result<(IndexResult, C64), CharvalError> {
    let mut n = gamma.nodes.next_power_of_two().max(8);
    let mut vals: Vec<C64> = Vec::new();
    let mut ks: Vec<C64> = Vec::new();
    let eval_at = |j: usize, n: usize| -> (C64, f64) {
        let phi = 2.0 * std::f64::consts::PI * j as f64 / n as f64;
        (
            gamma.center + gamma.radius * c64(phi.cos(), phi.sin()),
            phi,
        )
    };
    // initial pass
    for j in 0..n {
        let (k, _) = eval_at(j, n);
        ks.push(k);
        vals.push(trace_logdet_deriv(f, k, guard)?);
    }
    let sum_pair = |ks: &[C64], vals: &[C64]| -> (C64, C64) {
        let n = vals.len();
        let mut idx = c64(0.0, 0.0);
        let mut mom = c64(0.0, 0.0);
        for j in 0..n {
            let e = (ks[j] - gamma.center) / gamma.radius; // e^{iφ_j}
            idx += vals[j] * e;
            mom += vals[j] * e * ks[j];
        }
        let scale = gamma.radius / n as f64;
        (idx * scale, mom * scale)
    };
    let (mut idx, mut mom) = sum_pair(&ks, &vals);
    loop {
        if n >= 8192 {
            return Err(CharvalError::NotConverged(format!(
                "circle at {} radius {:.3e}: {} nodes, index {}",
                gamma.center, gamma.radius, n, idx
            )));
        }
        // interleave new odd nodes
        let mut ks2 = Vec::with_capacity(2 * n);
        let mut vals2 = Vec::with_capacity(2 * n);
        for j in 0..n {
            ks2.push(ks[j]);
            vals2.push(vals[j]);
            let (k, _) = eval_at(2 * j + 1, 2 * n);
            ks2.push(k);
            vals2.push(trace_logdet_deriv(f, k, guard)?);
        }
        n *= 2;
        ks = ks2;
        vals = vals2;
        let (idx2, mom2) = sum_pair(&ks, &vals);
        let stable = (idx2 - idx).norm() <= tol::CONTOUR_QUAD * idx2.norm().max(1.0)
            && (mom2 - mom).norm() <= tol::CONTOUR_QUAD * mom2.norm().max(gamma.radius);
        idx = idx2;
        mom = mom2;
        if stable {
            break;
        }
    }
    let value = idx.re.round();
    if (idx - c64(value, 0.0)).norm() > tol::INDEX_SNAP {
        return Err(CharvalError::NotConverged(format!(
            "index {idx} not within {:.1e} of an integer",
            tol::INDEX_SNAP
        )));
    }
    Ok((
        IndexResult {
            value: value as i64,
            raw: idx,
        },
        mom,
    ))
}

/// Gohberg–Sigal index of `F` along the circle `γ`.
pub fn index_on_contour(
    f: &dyn AnalyticFamily,
    gamma: &ContourSpec,
) -> Result<IndexResult, CharvalError> {
    circle_index_moment(f, gamma, tol::CONTOUR_GUARD).map(|(i, _)| i)
}

// ---------------------------------------------------------------------------
// log-polar subdivision search
// ---------------------------------------------------------------------------

static GL24: LazyLock<(Vec<f64>, Vec<f64>)> = LazyLock::new(|| gauss_legendre(24));

/// Gauss–Legendre nodes/weights on [−1, 1] by Newton iteration on `P_n`.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut xs = vec![0.0; n];
    let mut ws = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            // Legendre recurrence for P_n(x) and P'_n(x)
            let (mut p0, mut p1) = (1.0f64, x);
            for j in 2..=n {
                let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (mut p0, mut p1) = (1.0f64, x);
        for j in 2..=n {
            let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
            p0 = p1;
            p1 = p2;
        }
        let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
        xs[n - 1 - i] = x;
        ws[n - 1 - i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (xs, ws)
}

/// Annulus sector `e^{t} e^{iφ}`, `t ∈ [t0, t1]`, `φ ∈ [p0, p1]`.
#[derive(Debug, Clone, Copy)]
struct Cell {
    t0: f64,
    t1: f64,
    p0: f64,
    p1: f64,
}

impl Cell {
    /// Rough diameter in `k` units.
    fn diameter(&self) -> f64 {
        let r1 = self.t1.exp();
        let r0 = self.t0.exp();
        (r1 - r0).hypot(r1 * (self.p1 - self.p0))
    }
}

/// One smooth boundary piece of a cell, `k(s)` with `s ∈ [0, 1]`.
enum Seg {
    /// radial in log coordinate at fixed angle: `k = e^{t(s)} e^{iφ}`
    Radial { t0: f64, t1: f64, phi: f64 },
    /// arc at fixed radius: `k = r e^{iφ(s)}`
    Arc { r: f64, p0: f64, p1: f64 },
}

impl Seg {
    fn point_and_velocity(&self, s: f64) -> (C64, C64) {
        match *self {
            Seg::Radial { t0, t1, phi } => {
                let t = t0 + (t1 - t0) * s;
                let k = t.exp() * c64(phi.cos(), phi.sin());
                (k, k * (t1 - t0))
            }
            Seg::Arc { r, p0, p1 } => {
                let phi = p0 + (p1 - p0) * s;
                let k = r * c64(phi.cos(), phi.sin());
                (k, I * k * (p1 - p0))
            }
        }
    }
}

/// Index and power moments `μ_p = (1/2πi)∮ k^p Tr(F′F⁻¹) dk`, `p = 1, 2`,
/// over a positively oriented cell boundary using composite Gauss–Legendre
/// with panel doubling.
fn cell_index_moment(
    f: &dyn AnalyticFamily,
    cell: &Cell,
    guard: f64,
    budget: &mut u64,
) -> Result<(IndexResult, C64, C64), CharvalError> {
    let segs = [
        Seg::Radial {
            t0: cell.t0,
            t1: cell.t1,
            phi: cell.p0,
        },
        Seg::Arc {
            r: cell.t1.exp(),
            p0: cell.p0,
            p1: cell.p1,
        },
        Seg::Radial {
            t0: cell.t1,
            t1: cell.t0,
            phi: cell.p1,
        },
        Seg::Arc {
            r: cell.t0.exp(),
            p0: cell.p1,
            p1: cell.p0,
        },
    ];
    let (xs, ws) = &*GL24;
    let mut panels = 1usize;
    let mut prev: Option<(C64, C64, C64)> = None;
    loop {
        if *budget == 0 {
            return Err(CharvalError::NotConverged(
                "cell evaluation budget exhausted".into(),
            ));
        }
        *budget -= 1;
        let mut idx = c64(0.0, 0.0);
        let mut mom = c64(0.0, 0.0);
        let mut mom2 = c64(0.0, 0.0);
        for seg in &segs {
            for p in 0..panels {
                let a = p as f64 / panels as f64;
                let b = (p + 1) as f64 / panels as f64;
                for (x, w) in xs.iter().zip(ws.iter()) {
                    let s = 0.5 * (a + b) + 0.5 * (b - a) * x;
                    let (k, vel) = seg.point_and_velocity(s);
                    let g = trace_logdet_deriv(f, k, guard)?;
                    let wq = 0.5 * (b - a) * w;
                    idx += g * vel * wq;
                    mom += g * vel * k * wq;
                    mom2 += g * vel * k * k * wq;
                }
            }
        }
        let two_pi_i = 2.0 * std::f64::consts::PI * I;
        idx /= two_pi_i;
        mom /= two_pi_i;
        mom2 /= two_pi_i;
        if let Some((pi, pm, pm2)) = prev {
            let rscale = cell.t1.exp();
            if (idx - pi).norm() <= tol::CONTOUR_QUAD * idx.norm().max(1.0)
                && (mom - pm).norm() <= tol::CONTOUR_QUAD * mom.norm().max(rscale)
                && (mom2 - pm2).norm() <= tol::CONTOUR_QUAD * mom2.norm().max(rscale * rscale)
            {
                let value = idx.re.round();
                if (idx - c64(value, 0.0)).norm() > tol::INDEX_SNAP {
                    return Err(CharvalError::BoundaryZero);
                }
                return Ok((
                    IndexResult {
                        value: value as i64,
                        raw: idx,
                    },
                    mom,
                    mom2,
                ));
            }
        }
        prev = Some((idx, mom, mom2));
        panels *= 2;
        if panels > 64 {
            return Err(CharvalError::BoundaryZero);
        }
    }
}

/// Single power moment `(1/2πi)∮ k^p Tr(F′F⁻¹) dk` over a cell boundary.
fn cell_power_moment(
    f: &dyn AnalyticFamily,
    cell: &Cell,
    p: i32,
    guard: f64,
) -> Result<C64, CharvalError> {
    let segs = [
        Seg::Radial { t0: cell.t0, t1: cell.t1, phi: cell.p0 },
        Seg::Arc { r: cell.t1.exp(), p0: cell.p0, p1: cell.p1 },
        Seg::Radial { t0: cell.t1, t1: cell.t0, phi: cell.p1 },
        Seg::Arc { r: cell.t0.exp(), p0: cell.p1, p1: cell.p0 },
    ];
    let (xs, ws) = &*GL24;
    let mut panels = 1usize;
    let mut prev: Option<C64> = None;
    let scale = cell.t1.exp().powi(p);
    loop {
        let mut mom = c64(0.0, 0.0);
        for seg in &segs {
            for pp in 0..panels {
                let a = pp as f64 / panels as f64;
                let b = (pp + 1) as f64 / panels as f64;
                for (x, w) in xs.iter().zip(ws.iter()) {
                    let s = 0.5 * (a + b) + 0.5 * (b - a) * x;
                    let (k, vel) = seg.point_and_velocity(s);
                    let g = trace_logdet_deriv(f, k, guard)?;
                    mom += g * vel * k.powi(p) * (0.5 * (b - a) * w);
                }
            }
        }
        mom /= 2.0 * std::f64::consts::PI * I;
        if let Some(pm) = prev {
            if (mom - pm).norm() <= tol::CONTOUR_QUAD * mom.norm().max(scale) {
                return Ok(mom);
            }
        }
        prev = Some(mom);
        panels *= 2;
        if panels > 64 {
            return Err(CharvalError::BoundaryZero);
        }
    }
}

/// Options for [`locate_characteristic_values`].
#[derive(Debug, Clone)]
pub struct LocateOptions {
    /// Punctured-disk radius around `k = 0`.
    pub inner_radius: f64,
    /// Cells below this diameter report a multiple zero at the centroid.
    pub cell_tol: f64,
    /// Relative σ_min guard along subdivision-cell contours.  Looser than
    /// the public contour guard: tiny cells hugging a multiple zero see
    /// σ_min shrink like a power of the cell size.
    pub guard: f64,
    /// Subdivision jitter retries per cell.
    pub retries: u32,
    pub max_depth: u32,
    pub seed: u64,
}

impl LocateOptions {
    pub fn for_region(eps0: f64, outer_radius: f64, seed: u64) -> Self {
        Self {
            inner_radius: tol::PUNCTURE_REL * eps0,
            cell_tol: outer_radius * 1e-9,
            guard: 5e-14,
            retries: 5,
            max_depth: 48,
            seed,
        }
    }
}

/// All characteristic values of `f` in the annulus
/// `inner_radius < |k| < outer_radius`, with multiplicities; the returned
/// multiplicities sum to the index of the region.
pub fn locate_characteristic_values(
    f: &dyn AnalyticFamily,
    outer_radius: f64,
    opts: &LocateOptions,
) -> Result<Vec<(C64, usize)>, CharvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut attempt = 0u32;
    loop {
        attempt += 1;
        let jr: f64 = if attempt == 1 {
            0.0
        } else {
            rng.random_range(-0.02..0.02)
        };
        let r_in = opts.inner_radius * (1.0 + jr);
        let r_out = outer_radius * (1.0 - jr.abs());
        match locate_once(f, r_in, r_out, opts, &mut rng) {
            Ok(zeros) => return Ok(zeros),
            Err(CharvalError::BoundaryZero) | Err(CharvalError::SingularOnContour { .. })
                if attempt <= opts.retries =>
            {
                continue;
            }
            Err(e) => return Err(e),
        }
    }
}

fn locate_once(
    f: &dyn AnalyticFamily,
    r_in: f64,
    r_out: f64,
    opts: &LocateOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(C64, usize)>, CharvalError> {
    // annulus index = winding(outer) − winding(inner); each raw winding is an
    // integer (zeros minus poles enclosed), their difference counts zeros in
    // the annulus since the only pole sits at k = 0
    let n_annulus = {
        let outer = index_on_contour(f, &ContourSpec::new(c64(0.0, 0.0), r_out))?;
        let inner = index_on_contour(f, &ContourSpec::new(c64(0.0, 0.0), r_in))?;
        outer.value - inner.value
    };
    if n_annulus < 0 {
        return Err(CharvalError::NotConverged(format!(
            "negative annulus count {n_annulus}"
        )));
    }
    let mut zeros: Vec<(C64, usize)> = Vec::new();
    if n_annulus == 0 {
        return Ok(zeros);
    }
    let phi0 = -std::f64::consts::FRAC_PI_2 + 0.371 + rng.random_range(-0.1..0.1);
    let root = Cell {
        t0: r_in.ln(),
        t1: r_out.ln(),
        p0: phi0,
        p1: phi0 + 2.0 * std::f64::consts::PI,
    };
    // the root spans the full angle; its two "radial" edges coincide, so the
    // cell boundary integral equals the annulus index and can be subdivided
    let mut budget: u64 = 400_000;
    process_cell(f, &root, n_annulus as usize, 0, opts, rng, &mut zeros, &mut budget)?;
    let total: usize = zeros.iter().map(|z| z.1).sum();
    if total != n_annulus as usize {
        return Err(CharvalError::NotConverged(format!(
            "located multiplicities sum to {total}, annulus index is {n_annulus}"
        )));
    }
    zeros.sort_by(|a, b| {
        (a.0.norm(), a.0.arg())
            .partial_cmp(&(b.0.norm(), b.0.arg()))
            .expect("finite zeros")
    });
    Ok(zeros)
}

#[allow(clippy::too_many_arguments)]
fn process_cell(
    f: &dyn AnalyticFamily,
    cell: &Cell,
    known_index: usize,
    depth: u32,
    opts: &LocateOptions,
    rng: &mut ChaCha8Rng,
    zeros: &mut Vec<(C64, usize)>,
    budget: &mut u64,
) -> Result<(), CharvalError> {
    if known_index == 0 {
        return Ok(());
    }
    if depth > opts.max_depth {
        return Err(CharvalError::NotConverged(format!(
            "max subdivision depth at cell {cell:?}"
        )));
    }
    if known_index == 1 {
        // a single zero: polish by Newton from the first moment
        let (idx, mom, _) = cell_index_moment(f, cell, opts.guard, budget)?;
        debug_assert_eq!(idx.value, 1);
        let z = newton_polish(f, mom, cell, zeros, opts)?;
        zeros.push((z, 1));
        return Ok(());
    }
    // multiple zeros: accept as one m-fold point once the moment spread
    // shows them coincident at the working resolution
    let m = known_index;
    let (_, mom, mom2) = cell_index_moment(f, cell, opts.guard, budget)?;
    let centroid = mom / c64(m as f64, 0.0);
    let spread2 = (mom2 / c64(m as f64, 0.0) - centroid * centroid)
        .norm()
        .sqrt();
    let spread_tol = opts.cell_tol.max(2e-4 * centroid.norm());
    let coincident = if spread2 <= spread_tol && m > 2 {
        // a symmetric m-point constellation fools the low moments; the m-th
        // power moment does not
        let momm = cell_power_moment(f, cell, m as i32, opts.guard)?;
        let dev = (momm / c64(m as f64, 0.0) - centroid.powi(m as i32)).norm();
        dev.powf(1.0 / m as f64) <= spread_tol.max(1e-3 * centroid.norm())
    } else {
        spread2 <= spread_tol
    };
    if coincident || cell.diameter() < opts.cell_tol {
        let z = newton_multiple(f, centroid, m, cell, zeros).unwrap_or(centroid);
        zeros.push((z, m));
        return Ok(());
    }
    // quadrisect with jittered split fractions
    for attempt in 0..=opts.retries {
        let (ft, fp) = if attempt == 0 {
            (0.5, 0.5)
        } else {
            (
                0.5 + rng.random_range(-0.15..0.15),
                0.5 + rng.random_range(-0.15..0.15),
            )
        };
        let tm = cell.t0 + (cell.t1 - cell.t0) * ft;
        let pm = cell.p0 + (cell.p1 - cell.p0) * fp;
        let children = [
            Cell { t0: cell.t0, t1: tm, p0: cell.p0, p1: pm },
            Cell { t0: tm, t1: cell.t1, p0: cell.p0, p1: pm },
            Cell { t0: cell.t0, t1: tm, p0: pm, p1: cell.p1 },
            Cell { t0: tm, t1: cell.t1, p0: pm, p1: cell.p1 },
        ];
        let mut counts = [0usize; 4];
        let mut ok = true;
        let mut total = 0usize;
        for (ci, ch) in children.iter().enumerate() {
            match cell_index_moment(f, ch, opts.guard, budget) {
                Ok((idx, _, _)) if idx.value >= 0 => {
                    counts[ci] = idx.value as usize;
                    total += counts[ci];
                }
                Ok(_) => {
                    ok = false;
                    break;
                }
                Err(CharvalError::BoundaryZero)
                | Err(CharvalError::SingularOnContour { .. }) => {
                    ok = false;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if ok && total == known_index {
            let before = zeros.len();
            let mut failed = false;
            for (ci, ch) in children.iter().enumerate() {
                match process_cell(f, ch, counts[ci], depth + 1, opts, rng, zeros, budget) {
                    Ok(()) => {}
                    Err(CharvalError::BoundaryZero)
                    | Err(CharvalError::SingularOnContour { .. }) => {
                        failed = true;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            if !failed {
                return Ok(());
            }
            zeros.truncate(before);
        }
        // else: a zero straddles a cut; retry with new jitter
    }
    Err(CharvalError::BoundaryZero)
}

/// Multiplicity-adapted Newton: step `−m / Tr(F⁻¹F′)`, quadratically
/// convergent at an exact m-fold zero.
fn newton_multiple(
    f: &dyn AnalyticFamily,
    start: C64,
    m: usize,
    cell: &Cell,
    accepted: &[(C64, usize)],
) -> Result<C64, CharvalError> {
    let mut k = start;
    let max_step = cell.diameter();
    for _ in 0..40 {
        let (fv, fd) = f.eval_with_deriv(k)?;
        let finv = match linalg::inv(&fv) {
            Ok(x) => x,
            Err(_) => return Ok(k),
        };
        let mut denom = linalg::trace(&finv.dot(&fd));
        for (z, mm) in accepted {
            denom -= c64(*mm as f64, 0.0) / (k - z);
        }
        let mut step = -c64(m as f64, 0.0) / denom;
        if !step.re.is_finite() || !step.im.is_finite() {
            return Ok(k);
        }
        if step.norm() > max_step {
            step *= max_step / step.norm();
        }
        k += step;
        if step.norm() <= 1e-12 * k.norm().max(1e-300) {
            return Ok(k);
        }
    }
    Ok(k)
}

/// Newton iteration on `log det F` with deflation of already accepted zeros:
/// step `−1 / (Tr(F⁻¹F′) − Σ m_i/(k − z_i))`.
fn newton_polish(
    f: &dyn AnalyticFamily,
    start: C64,
    cell: &Cell,
    accepted: &[(C64, usize)],
    _opts: &LocateOptions,
) -> Result<C64, CharvalError> {
    let mut k = start;
    let max_step = cell.diameter();
    let mut prev_step = f64::INFINITY;
    for _ in 0..60 {
        let (fv, fd) = f.eval_with_deriv(k)?;
        let finv = match linalg::inv(&fv) {
            Ok(m) => m,
            // singular to machine precision: we are numerically at the zero
            Err(_) => return Ok(k),
        };
        let mut denom = linalg::trace(&finv.dot(&fd));
        for (z, m) in accepted {
            denom -= c64(*m as f64, 0.0) / (k - z);
        }
        let mut step = -1.0 / denom;
        if !step.re.is_finite() || !step.im.is_finite() {
            return Err(CharvalError::NotConverged(format!(
                "Newton step diverged near {k}"
            )));
        }
        if step.norm() > max_step {
            step *= max_step / step.norm();
        }
        k += step;
        let sn = step.norm();
        let kn = k.norm().max(1e-300);
        if sn <= 1e-12 * kn {
            return Ok(k);
        }
        // quadratic convergence has bottomed out at the evaluation noise
        if sn >= 0.5 * prev_step && sn <= 1e-7 * kn {
            return Ok(k);
        }
        prev_step = sn;
    }
    Err(CharvalError::NotConverged(format!(
        "Newton did not converge near {k}"
    )))
}

// ---------------------------------------------------------------------------
// residue ranks and the perturbed resolvent
// ---------------------------------------------------------------------------

/// Evaluator of the meromorphic function whose residue rank is wanted.
pub enum ResolventEvaluator<'a> {
    /// Full dense matrices.
    Dense(&'a dyn Fn(C64) -> Result<Array2<C64>, CharvalError>),
    /// Factors `(A, B)` of a function equal to the target modulo a part that
    /// is analytic inside the contour (the free resolvent contributes
    /// nothing to residues on contours avoiding `k = 0`).
    Factored(&'a dyn Fn(C64) -> Result<(Array2<C64>, Array2<C64>), CharvalError>),
}

/// Rank of `(1/2πi) ∮_γ R(k) dk`: singular values above
/// [`tol::RANK_CUT`] relative to the largest.  Singular values within a
/// factor 10 of the cutoff raise [`CharvalError::RankAmbiguous`].
pub fn residue_rank(ev: &ResolventEvaluator, gamma: &ContourSpec) -> Result<usize, CharvalError> {
    let mut n = gamma.nodes.next_power_of_two().max(16);
    let mut svals = residue_singular_values(ev, gamma, n)?;
    loop {
        n *= 2;
        let next = residue_singular_values(ev, gamma, n)?;
        let stable = {
            let m = svals.len().max(next.len());
            let get = |v: &Vec<f64>, i: usize| v.get(i).copied().unwrap_or(0.0);
            let top = get(&next, 0).max(1e-300);
            (0..m).all(|i| (get(&svals, i) - get(&next, i)).abs() <= 1e-6 * top + 1e-14)
        };
        svals = next;
        if stable || n >= 256 {
            break;
        }
    }
    let smax = svals.first().copied().unwrap_or(0.0);
    // an entirely holomorphic integrand: quadrature leaves only noise
    if smax < 1e-11 * residue_scale(ev, gamma)?.max(1e-300) {
        return Ok(0);
    }
    let cutoff = tol::RANK_CUT * smax;
    for &s in &svals {
        if s > cutoff / tol::RANK_AMBIG && s < cutoff * tol::RANK_AMBIG {
            return Err(CharvalError::RankAmbiguous { sigma: s, cutoff });
        }
    }
    Ok(svals.iter().filter(|&&s| s > cutoff).count())
}

/// Magnitude scale of the integrand, for the rank-zero floor.
fn residue_scale(ev: &ResolventEvaluator, gamma: &ContourSpec) -> Result<f64, CharvalError> {
    let k = gamma.center + gamma.radius;
    let norm = match ev {
        ResolventEvaluator::Dense(f) => linalg::fro_norm(&f(k)?),
        ResolventEvaluator::Factored(f) => {
            let (a, b) = f(k)?;
            linalg::fro_norm(&a) * linalg::fro_norm(&b)
        }
    };
    Ok(norm * gamma.radius)
}

fn residue_singular_values(
    ev: &ResolventEvaluator,
    gamma: &ContourSpec,
    n: usize,
) -> Result<Vec<f64>, CharvalError> {
    let node = |j: usize| -> (C64, C64) {
        let phi = 2.0 * std::f64::consts::PI * j as f64 / n as f64;
        let e = c64(phi.cos(), phi.sin());
        (gamma.center + gamma.radius * e, e * gamma.radius / n as f64)
    };
    match ev {
        ResolventEvaluator::Dense(f) => {
            let mut acc: Option<Array2<C64>> = None;
            for j in 0..n {
                let (k, w) = node(j);
                let r = f(k)?.mapv(|z| z * w);
                acc = Some(match acc {
                    None => r,
                    Some(a) => a + r,
                });
            }
            let a = acc.expect("n >= 16");
            Ok(linalg::svdvals(&a)?.to_vec())
        }
        ResolventEvaluator::Factored(f) => {
            // stack the factors and read singular values off the QR cores:
            // Σ w_j A_j B_j = P̂ Q̂ with P̂ = [w_j A_j], Q̂ = [B_j] stacked
            let mut lefts: Vec<Array2<C64>> = Vec::with_capacity(n);
            let mut rights: Vec<Array2<C64>> = Vec::with_capacity(n);
            for j in 0..n {
                let (k, w) = node(j);
                let (a, b) = f(k)?;
                lefts.push(a.mapv(|z| z * w));
                rights.push(b);
            }
            let big_n = lefts[0].nrows();
            let r = lefts[0].ncols();
            let mut p = Array2::<C64>::zeros((big_n, n * r));
            let mut qh = Array2::<C64>::zeros((big_n, n * r));
            for (j, (a, b)) in lefts.iter().zip(rights.iter()).enumerate() {
                for row in 0..big_n {
                    for c in 0..r {
                        p[[row, j * r + c]] = a[[row, c]];
                        qh[[row, j * r + c]] = b[[c, row]].conj();
                    }
                }
            }
            use ndarray_linalg::QR;
            let (_, rp) = p.qr().map_err(LinalgError::from)?;
            let (_, rq) = qh.qr().map_err(LinalgError::from)?;
            let core = rp.dot(&rq.t().mapv(|z| z.conj()));
            Ok(linalg::svdvals(&core)?.to_vec())
        }
    }
}

/// `𝓡_ω(k) = 𝓡₀(k)(I + 𝒫_ω(z_q(k)))⁻¹` as a full matrix on the box.
/// Fails with [`CharvalError::AtPole`] when the family is singular beyond
/// the condition limit — the signature of `k` being a resonance.
pub fn perturbed_resolvent(fam: &BirmanSchwinger, k: C64) -> Result<Array2<C64>, CharvalError> {
    let fv = fam.eval(k)?;
    let sv = linalg::svdvals(&fv)?;
    let smax = sv.iter().cloned().fold(0.0f64, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    let cond = smax / smin.max(1e-300);
    if cond > tol::AT_POLE_COND {
        return Err(CharvalError::AtPole { cond });
    }
    let (a, b) = fam
        .resolvent_correction(k)
        .map_err(|e| CharvalError::NotConverged(format!("correction factors: {e}")))?;
    let base = fam.resolvent().eval(k)?;
    Ok(base + a.dot(&b))
}

// ---------------------------------------------------------------------------
// records
// ---------------------------------------------------------------------------

/// Which sheet of the local two-sheeted surface a `k` lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Sheet {
    /// `Im k > 0`: poles are genuine eigenvalues `z = λ_q + k²`.
    First,
    /// `Im k ≤ 0`: the unphysical sheet.
    Second,
}

pub fn sheet_of(k: C64) -> Sheet {
    if k.im > 0.0 {
        Sheet::First
    } else {
        Sheet::Second
    }
}

/// A certified resonance: location, dual multiplicities, sheet.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ResonanceRecord {
    #[serde(serialize_with = "crate::charval::ser_c64")]
    pub k: C64,
    #[serde(serialize_with = "crate::charval::ser_c64")]
    pub z: C64,
    pub mult_index: usize,
    pub mult_residue: usize,
    /// Worst distance of the raw contour index from an integer.
    pub index_defect: f64,
    pub sheet: Sheet,
    pub cluster_id: Option<usize>,
    #[serde(serialize_with = "crate::charval::ser_c64")]
    pub omega: C64,
    pub threshold_id: usize,
}

pub(crate) fn ser_c64<S: serde::Serializer>(z: &C64, s: S) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(2))?;
    seq.serialize_element(&z.re)?;
    seq.serialize_element(&z.im)?;
    seq.end()
}

/// Certifies located zeros into [`ResonanceRecord`]s: a small circle around
/// each zero yields the contour index, and the residue rank of the perturbed
/// resolvent on the same circle yields the second multiplicity.
pub fn certify_records(
    fam: &BirmanSchwinger,
    zeros: &[(C64, usize)],
    inner_radius: f64,
    omega: C64,
    threshold_id: usize,
) -> Result<Vec<ResonanceRecord>, CharvalError> {
    let res = fam.resolvent();
    let mut records = Vec::with_capacity(zeros.len());
    for (i, &(k0, _m)) in zeros.iter().enumerate() {
        // contour radius: keep other zeros and the pole at 0 well outside
        let mut gap = (k0.norm() - inner_radius).abs().min(k0.norm());
        for (j, &(kj, _)) in zeros.iter().enumerate() {
            if j != i {
                gap = gap.min((k0 - kj).norm());
            }
        }
        gap = gap.min(res.eps0 - k0.norm());
        let mut radius = 0.2 * gap;
        let mut last_err: Option<CharvalError> = None;
        let mut done = None;
        for _ in 0..5 {
            let gamma = ContourSpec::new(k0, radius);
            let idx = match index_on_contour(fam, &gamma) {
                Ok(v) => v,
                Err(e @ CharvalError::SingularOnContour { .. }) => {
                    radius *= 0.7;
                    last_err = Some(e);
                    continue;
                }
                Err(e) => return Err(e),
            };
            let correction = |k: C64| fam.resolvent_correction(k).map_err(|e| {
                CharvalError::NotConverged(format!("correction factors: {e}"))
            });
            let rank = match residue_rank(&ResolventEvaluator::Factored(&correction), &gamma) {
                Ok(r) => r,
                Err(e @ CharvalError::RankAmbiguous { .. }) => {
                    radius *= 0.7;
                    last_err = Some(e);
                    continue;
                }
                Err(e) => return Err(e),
            };
            done = Some((idx, rank));
            break;
        }
        let (idx, rank) = match done {
            Some(v) => v,
            None => return Err(last_err.expect("retries exhausted with an error")),
        };
        records.push(ResonanceRecord {
            k: k0,
            z: res.z_of(k0),
            mult_index: idx.value.max(0) as usize,
            mult_residue: rank,
            index_defect: idx.integer_defect(),
            sheet: sheet_of(k0),
            cluster_id: None,
            omega,
            threshold_id,
        });
    }
    Ok(records)
}
