//! Least-squares line fits used by the scaling scans.

use serde::{Deserialize, Serialize};

/// Ordinary least-squares fit of `y = intercept + slope * x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub slope_stderr: f64,
    pub n: usize,
}

pub fn line_fit(x: &[f64], y: &[f64]) -> Option<LineFit> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse = (syy - slope * sxy).max(0.0);
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    let slope_stderr = if n > 2 {
        (sse / (nf - 2.0) / sxx).sqrt()
    } else {
        f64::NAN
    };
    Some(LineFit {
        slope,
        intercept,
        r2,
        slope_stderr,
        n,
    })
}

/// Exponent of a power law `q ~ C alpha^p`, fitted in log-log coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub exponent: f64,
    pub intercept: f64,
    pub r2: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub points: usize,
}

/// Minimum number of scan points a scaling fit accepts.
pub const MIN_FIT_POINTS: usize = 6;

/// Fits `log q` against `log alpha`, ignoring non-positive or non-finite points.
pub fn scaling_fit(alpha: &[f64], q: &[f64]) -> Option<ScalingFit> {
    let (lx, ly): (Vec<f64>, Vec<f64>) = alpha
        .iter()
        .zip(q)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0 && a.is_finite() && b.is_finite())
        .map(|(a, b)| (a.ln(), b.ln()))
        .unzip();
    if lx.len() < MIN_FIT_POINTS {
        return None;
    }
    let f = line_fit(&lx, &ly)?;
    Some(ScalingFit {
        exponent: f.slope,
        intercept: f.intercept,
        r2: f.r2,
        alpha_min: lx.iter().cloned().fold(f64::INFINITY, f64::min).exp(),
        alpha_max: lx.iter().cloned().fold(f64::NEG_INFINITY, f64::max).exp(),
        points: lx.len(),
    })
}

/// `n` logarithmically spaced values from `lo` to `hi` inclusive.
pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}
