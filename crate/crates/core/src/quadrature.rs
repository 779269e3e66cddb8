//! One-dimensional quadrature: adaptive Gauss–Kronrod and Gauss–Legendre rules.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{KinError, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// Single 15-point Kronrod panel on `[a, b]`, returning `(value, error estimate)`.
pub fn gk15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut rk = fc * WGK[7];
    let mut rg = fc * WG[3];
    for j in 0..7 {
        let dx = h * XGK[j];
        let s = f(c - dx) + f(c + dx);
        rk += WGK[j] * s;
        if j % 2 == 1 {
            rg += WG[j / 2] * s;
        }
    }
    (rk * h, ((rk - rg) * h).abs())
}

struct Panel {
    a: f64,
    b: f64,
    val: f64,
    err: f64,
}

impl PartialEq for Panel {
    fn eq(&self, o: &Self) -> bool {
        self.err == o.err
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Panel {
    fn cmp(&self, o: &Self) -> Ordering {
        self.err.total_cmp(&o.err)
    }
}

/// Tolerances and panel budget for [`integrate`].
#[derive(Clone, Copy, Debug)]
pub struct QuadOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_panels: usize,
}

impl Default for QuadOptions {
    fn default() -> Self {
        Self {
            abs_tol: 1e-14,
            rel_tol: 1e-9,
            max_panels: 2000,
        }
    }
}

/// Globally adaptive Gauss–Kronrod integration over `[a, b]`, with optional
/// interior breakpoints where the integrand is known to be non-smooth.
pub fn integrate<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    breaks: &[f64],
    opts: QuadOptions,
) -> Result<(f64, f64)> {
    if a == b {
        return Ok((0.0, 0.0));
    }
    let (lo, hi, sign) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };
    let mut pts = vec![lo];
    let mut inner: Vec<f64> = breaks.iter().cloned().filter(|&p| p > lo && p < hi).collect();
    inner.sort_by(f64::total_cmp);
    inner.dedup();
    pts.extend(inner);
    pts.push(hi);

    let mut heap = BinaryHeap::new();
    let (mut total, mut total_err) = (0.0, 0.0);
    for w in pts.windows(2) {
        let (val, err) = gk15(&mut f, w[0], w[1]);
        total += val;
        total_err += err;
        heap.push(Panel {
            a: w[0],
            b: w[1],
            val,
            err,
        });
    }
    while total_err > opts.abs_tol.max(opts.rel_tol * total.abs()) {
        if !total.is_finite() {
            return Err(KinError::QuadratureDivergence("non-finite integrand".into()));
        }
        if heap.len() >= opts.max_panels {
            return Err(KinError::QuadratureDivergence(format!(
                "panel budget exhausted: value {total:e}, error {total_err:e}"
            )));
        }
        let p = heap.pop().expect("heap is never empty");
        let m = 0.5 * (p.a + p.b);
        if m <= p.a || m >= p.b {
            // Panel at machine resolution: accept what we have.
            heap.push(p);
            break;
        }
        let (v1, e1) = gk15(&mut f, p.a, m);
        let (v2, e2) = gk15(&mut f, m, p.b);
        total += v1 + v2 - p.val;
        total_err += e1 + e2 - p.err;
        heap.push(Panel {
            a: p.a,
            b: m,
            val: v1,
            err: e1,
        });
        heap.push(Panel {
            a: m,
            b: p.b,
            val: v2,
            err: e2,
        });
    }
    // Re-sum in a fixed order to remove heap-order rounding.
    let mut panels: Vec<Panel> = heap.into_vec();
    panels.sort_by(|x, y| x.a.total_cmp(&y.a));
    let val: f64 = panels.iter().map(|p| p.val).sum();
    let err: f64 = panels.iter().map(|p| p.err).sum();
    if !val.is_finite() {
        return Err(KinError::QuadratureDivergence("non-finite integrand".into()));
    }
    Ok((sign * val, err))
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            if n == 1 {
                p0 = 1.0;
                p1 = z;
            }
            dp = nf * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}
