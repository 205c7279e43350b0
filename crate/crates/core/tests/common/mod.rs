//! Independent reference computations shared by the integration tests.

#![allow(dead_code)]

/// Lowest eigenpair of the symmetric tridiagonal matrix with diagonal `a` and off-diagonal `b`.
fn lowest_tridiagonal(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let n = a.len();
    // Sturm count of eigenvalues below x.
    let count = |x: f64| -> usize {
        let mut c = 0;
        let mut q = a[0] - x;
        if q < 0.0 {
            c += 1;
        }
        for i in 1..n {
            let qq = if q == 0.0 { 1e-300 } else { q };
            q = a[i] - x - b[i - 1] * b[i - 1] / qq;
            if q < 0.0 {
                c += 1;
            }
        }
        c
    };
    let bound = a.iter().zip(0..).map(|(d, i)| d.abs() + 2.0 * b.get(i).copied().unwrap_or(0.0).abs()).fold(0.0, f64::max) + 1.0;
    let (mut lo, mut hi) = (-bound, bound);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if count(mid) >= 1 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let lam = 0.5 * (lo + hi);
    // Inverse iteration with a slightly shifted Thomas solve.
    let shift = lam - 1e-10 * lam.abs().max(1e-12);
    let mut v = vec![1.0; n];
    for _ in 0..3 {
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        let mut m = a[0] - shift;
        c[0] = if n > 1 { b[0] / m } else { 0.0 };
        d[0] = v[0] / m;
        for i in 1..n {
            m = a[i] - shift - b[i - 1] * c[i - 1];
            if i < n - 1 {
                c[i] = b[i] / m;
            }
            d[i] = (v[i] - b[i - 1] * d[i - 1]) / m;
        }
        let mut x = vec![0.0; n];
        x[n - 1] = d[n - 1];
        for i in (0..n - 1).rev() {
            x[i] = d[i] - c[i] * x[i + 1];
        }
        let norm = x.iter().map(|t| t * t).sum::<f64>().sqrt();
        v = x.into_iter().map(|t| t / norm).collect();
    }
    (lam, v)
}

/// Ground state energy of `1/2 int |grad psi|^2 - kappa/2 D(|psi|^2, |psi|^2)` for radial
/// `psi` on `[0, r_max]` with `points` interior finite-difference nodes, by self-consistent
/// iteration. Returns `(energy, multiplier)`.
pub fn radial_choquard(kappa: f64, r_max: f64, points: usize) -> (f64, f64) {
    let n = points;
    let h = r_max / (n + 1) as f64;
    let r: Vec<f64> = (1..=n).map(|i| i as f64 * h).collect();
    // u = sqrt(4 pi) r psi, int u^2 dr = 1.
    let mut u: Vec<f64> = r.iter().map(|&x| x * (-x * kappa).exp()).collect();
    let norm = (u.iter().map(|t| t * t).sum::<f64>() * h).sqrt();
    u.iter_mut().for_each(|t| *t /= norm);
    let potential = |u: &[f64]| -> Vec<f64> {
        // Phi(r) = (1/r) int_0^r u^2 + int_r^inf u^2 / s.
        let w: Vec<f64> = u.iter().map(|t| t * t * h).collect();
        let mut inner = vec![0.0; n];
        let mut acc = 0.0;
        for i in 0..n {
            acc += w[i];
            inner[i] = acc - 0.5 * w[i];
        }
        let mut outer = vec![0.0; n];
        let mut acc = 0.0;
        for i in (0..n).rev() {
            acc += w[i] / r[i];
            outer[i] = acc - 0.5 * w[i] / r[i];
        }
        (0..n).map(|i| inner[i] / r[i] + outer[i]).collect()
    };
    let mut phi = potential(&u);
    let mut lam = 0.0;
    for _ in 0..500 {
        let diag: Vec<f64> = (0..n).map(|i| 1.0 / (h * h) - kappa * phi[i]).collect();
        let off = vec![-0.5 / (h * h); n - 1];
        let (l, v) = lowest_tridiagonal(&diag, &off);
        let s = (v.iter().map(|t| t * t).sum::<f64>() * h).sqrt();
        let v: Vec<f64> = v.iter().map(|t| t / s).collect();
        let sign = if v.iter().sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
        u = v.into_iter().map(|t| t * sign).collect();
        let new_phi = potential(&u);
        let change = new_phi.iter().zip(&phi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        phi = phi.iter().zip(&new_phi).map(|(a, b)| 0.5 * a + 0.5 * b).collect();
        lam = l;
        if change < 1e-13 {
            break;
        }
    }
    let phi = potential(&u);
    let d: f64 = u.iter().zip(&phi).map(|(a, p)| a * a * p).sum::<f64>() * h;
    let mut t = 0.0;
    for i in 0..=n {
        let a = if i == 0 { 0.0 } else { u[i - 1] };
        let b = if i == n { 0.0 } else { u[i] };
        t += (b - a) * (b - a) / h;
    }
    (0.5 * t - 0.5 * kappa * d, lam)
}
