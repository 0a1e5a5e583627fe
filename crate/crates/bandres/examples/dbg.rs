use bandres::{c64, linalg, C64};
use ndarray::Array2;

fn main() {
    // replicate the case-B U_rho assembly
    let j = 4usize;
    let rho = 1.0f64;
    let norm = (1.0 / (rho / 2.0_f64).tanh()).sqrt();
    let w_plus = |n: i64| norm * (rho * n.abs() as f64 / 2.0).exp();
    let nmax = 33i64;
    let sites: Vec<i64> = (-nmax..=nmax).collect();
    let g = j;
    let mut u_rho = Array2::<C64>::zeros((sites.len() * g, sites.len() * g));
    for (i, &n) in sites.iter().enumerate() {
        for (jj, &m) in sites.iter().enumerate() {
            let c = (-rho * (n.abs() + m.abs()) as f64).exp();
            if c < 1e-14 { continue; }
            let ww = w_plus(n) * w_plus(m);
            for gg in 0..g {
                u_rho[[i * g + gg, jj * g + gg]] = c64(c * ww, 0.0);
            }
        }
    }
    println!("dim {} herm_defect {:.3e}", u_rho.nrows(), linalg::hermitian_defect(&u_rho));
    let (vals, _) = linalg::eigh(&u_rho).unwrap();
    let vmax = vals.iter().cloned().fold(0.0f64, f64::max);
    let vmin = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    println!("vmax {vmax:.6e} vmin {vmin:.6e} ratio {:.3e}", vmin/vmax);
}
