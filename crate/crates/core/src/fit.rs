//! Least-squares helpers for convergence studies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual of the fit.
    pub rms: f64,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LineFit> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return Err(Error::FitFailure { residual: f64::NAN });
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx <= 0.0 {
        return Err(Error::FitFailure { residual: f64::NAN });
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rms = (x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum::<f64>() / nf).sqrt();
    Ok(LineFit { slope, intercept, rms })
}

/// Exponent `p` and prefactor `c` of `y ~ c x^p` from a log-log fit of `|y|`.
pub fn power_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if y.iter().any(|v| *v == 0.0 || !v.is_finite()) {
        return Err(Error::FitFailure { residual: f64::NAN });
    }
    let lx: Vec<f64> = x.iter().map(|v| v.abs().ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.abs().ln()).collect();
    let f = linear_fit(&lx, &ly)?;
    Ok((f.slope, f.intercept.exp()))
}

/// `y = limit + coefficient * x^order` through three points with distinct decreasing `x`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Extrapolation {
    pub limit: f64,
    pub order: f64,
    pub coefficient: f64,
}

/// Fit `y = a + b x^p` exactly through three points, solving for `p` by bisection on
/// `(y0 - y1)/(y1 - y2)`; fails when the data are not monotone or `p` leaves `(1e-3, 20)`.
pub fn three_point_extrapolation(x: [f64; 3], y: [f64; 3]) -> Result<Extrapolation> {
    if !(x[0] > x[1] && x[1] > x[2] && x[2] > 0.0) {
        return Err(Error::FitFailure { residual: f64::NAN });
    }
    let r = (y[0] - y[1]) / (y[1] - y[2]);
    let g = |p: f64| (x[0].powf(p) - x[1].powf(p)) / (x[1].powf(p) - x[2].powf(p));
    let (mut lo, mut hi) = (1e-3, 20.0);
    if !(r.is_finite() && r > g(lo) && r < g(hi)) {
        return Err(Error::FitFailure { residual: r });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) < r {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let order = 0.5 * (lo + hi);
    let coefficient = (y[0] - y[1]) / (x[0].powf(order) - x[1].powf(order));
    Ok(Extrapolation { limit: y[2] - coefficient * x[2].powf(order), order, coefficient })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_line() {
        let f = linear_fit(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-14 && (f.intercept - 1.0).abs() < 1e-14 && f.rms < 1e-14);
    }

    #[test]
    fn degenerate_abscissa() {
        assert!(linear_fit(&[1.0, 1.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn non_monotone_is_rejected() {
        assert!(three_point_extrapolation([0.5, 0.25, 0.1], [1.0, 2.0, 1.5]).is_err());
    }

    proptest! {
        #[test]
        fn extrapolation_recovers_model(a in -1.0f64..1.0, b in 0.1f64..5.0, p in 0.3f64..4.0) {
            let x = [0.5f64, 0.25, 1.0 / 6.0];
            let y = x.map(|v| a + b * v.powf(p));
            let e = three_point_extrapolation(x, y).unwrap();
            prop_assert!((e.order - p).abs() < 1e-6 * p.max(1.0));
            prop_assert!((e.limit - a).abs() < 1e-8 * (a.abs() + b));
        }


        #[test]
        fn power_law_recovered(p in -3.0f64..3.0, c in 0.1f64..10.0) {
            let x = [0.5f64, 0.25, 0.125, 0.0625];
            let y: Vec<f64> = x.iter().map(|v| c * v.powf(p)).collect();
            let (q, d) = power_fit(&x, &y).unwrap();
            prop_assert!((q - p).abs() < 1e-10);
            prop_assert!((d / c - 1.0).abs() < 1e-10);
        }
    }
}
