//! Free transport along backward cycles, and the two sharpness experiments:
//! the diffuse boundary integral of |∇ₓf|ᵖ and the near-grazing blow-up of
//! ∂ₙf under specular reflection.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KinError, Result};
use crate::fit::{scaling_fit, ScalingFit};
use crate::geometry::{Builtin, ConvexDomain, PhaseState};
use crate::jacobians::{disk_grazing_state, disk_normal_derivatives, fd_trajectory_jacobian, FdStep};
use crate::stats::{pairwise_sum, Estimate};
use crate::trajectories::{build_cycle, tangent_basis, BoundaryCondition, DiffuseLaw, DEFAULT_BOUNCE_CAP};
use crate::{Mat3, Vec3};

/// How a phase-space function relates to the density F.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Representation {
    /// F itself.
    DensityF,
    /// f = F/√μ.
    RatioOverSqrtMu,
    /// g̃ = F/μ.
    RatioOverMu,
}

impl Representation {
    /// w(v) with F = w(v)·value.
    pub fn weight(&self, v: &Vec3) -> f64 {
        match self {
            Self::DensityF => 1.0,
            Self::RatioOverSqrtMu => DiffuseLaw::mu(v).sqrt(),
            Self::RatioOverMu => DiffuseLaw::mu(v),
        }
    }
}

/// Initial datum f₀(x, v), optionally with its analytic gradient.
pub trait PhaseFunction: Send + Sync {
    fn eval(&self, x: &Vec3, v: &Vec3) -> f64;

    /// (∇ₓf₀, ∇ᵥf₀) when known in closed form.
    fn gradient(&self, _x: &Vec3, _v: &Vec3) -> Option<(Vec3, Vec3)> {
        None
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Constant(pub f64);

impl PhaseFunction for Constant {
    fn eval(&self, _: &Vec3, _: &Vec3) -> f64 {
        self.0
    }
    fn gradient(&self, _: &Vec3, _: &Vec3) -> Option<(Vec3, Vec3)> {
        Some((Vec3::zeros(), Vec3::zeros()))
    }
}

/// f₀ = |v|².
#[derive(Clone, Copy, Debug)]
pub struct SpeedSquared;

impl PhaseFunction for SpeedSquared {
    fn eval(&self, _: &Vec3, v: &Vec3) -> f64 {
        v.norm_squared()
    }
    fn gradient(&self, _: &Vec3, v: &Vec3) -> Option<(Vec3, Vec3)> {
        Some((Vec3::zeros(), 2.0 * v))
    }
}

/// Outer edge of the bump support.
pub const BUMP_EDGE: f64 = 0.9;

/// Smooth cut-off: 1 on [0, 1/2], 0 on [0.9, ∞), C^∞ in between.
pub fn bump(r: f64) -> f64 {
    let psi = |y: f64| if y > 0.0 { (-1.0 / y).exp() } else { 0.0 };
    let y = (BUMP_EDGE - r) / (BUMP_EDGE - 0.5);
    if y >= 1.0 {
        1.0
    } else if y <= 0.0 {
        0.0
    } else {
        psi(y) / (psi(y) + psi(1.0 - y))
    }
}

/// f₀ = φ(|x|)φ(|v|) with the cut-off [`bump`]; vanishes near the boundary
/// of the unit ball.
#[derive(Clone, Copy, Debug)]
pub struct RadialBump;

impl PhaseFunction for RadialBump {
    fn eval(&self, x: &Vec3, v: &Vec3) -> f64 {
        bump(x.norm()) * bump(v.norm())
    }
}

/// f₀ = sin(3x₁)cos(2x₂), times e^{−|v−w|²} when a velocity centre w is given.
#[derive(Clone, Copy, Debug)]
pub struct TrigDatum {
    pub centre: Option<Vec3>,
}

impl PhaseFunction for TrigDatum {
    fn eval(&self, x: &Vec3, v: &Vec3) -> f64 {
        let s = (3.0 * x[0]).sin() * (2.0 * x[1]).cos();
        match self.centre {
            Some(w) => s * (-(v - w).norm_squared()).exp(),
            None => s,
        }
    }
    fn gradient(&self, x: &Vec3, v: &Vec3) -> Option<(Vec3, Vec3)> {
        let gx = Vec3::new(
            3.0 * (3.0 * x[0]).cos() * (2.0 * x[1]).cos(),
            -2.0 * (3.0 * x[0]).sin() * (2.0 * x[1]).sin(),
            0.0,
        );
        Some(match self.centre {
            Some(w) => {
                let g = (-(v - w).norm_squared()).exp();
                let s = (3.0 * x[0]).sin() * (2.0 * x[1]).cos();
                (gx * g, -2.0 * (v - w) * s * g)
            }
            None => (gx, Vec3::zeros()),
        })
    }
}

/// Wraps a closure as a datum without gradient.
pub struct FnDatum<F>(pub F);

impl<F: Fn(&Vec3, &Vec3) -> f64 + Send + Sync> PhaseFunction for FnDatum<F> {
    fn eval(&self, x: &Vec3, v: &Vec3) -> f64 {
        (self.0)(x, v)
    }
}

/// Free transport with a boundary condition. `datum` is the representation
/// `f0` is written in; values are reported in `representation`.
#[derive(Clone)]
pub struct TransportProblem {
    pub domain: ConvexDomain,
    pub bc: BoundaryCondition,
    pub f0: Arc<dyn PhaseFunction>,
    pub datum: Representation,
    pub representation: Representation,
}

impl TransportProblem {
    pub fn new(domain: ConvexDomain, bc: BoundaryCondition, f0: Arc<dyn PhaseFunction>, repr: Representation) -> Self {
        Self { domain, bc, f0, datum: repr, representation: repr }
    }

    /// Same problem, evaluated in another representation.
    pub fn in_representation(&self, repr: Representation) -> Self {
        Self { representation: repr, ..self.clone() }
    }

    /// g̃₀ = F₀/μ.
    fn ratio_datum(&self, x: &Vec3, v: &Vec3) -> f64 {
        let f = self.f0.eval(x, v);
        match self.datum {
            Representation::RatioOverMu => f,
            r => f * r.weight(v) / DiffuseLaw::mu(v),
        }
    }

    /// Converts g̃ at velocity v to the output representation.
    fn ratio_to_output(&self, g: f64, v: &Vec3) -> f64 {
        match self.representation {
            Representation::RatioOverMu => g,
            r => g * DiffuseLaw::mu(v) / r.weight(v),
        }
    }
}

/// Monte-Carlo settings for diffuse evaluations; the seed is carried by the
/// boundary condition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportMc {
    pub samples: usize,
    /// Distinguishes independent estimates under one seed.
    pub stream: u64,
}

impl Default for TransportMc {
    fn default() -> Self {
        Self { samples: 1000, stream: 0 }
    }
}

/// Bits reserved for the sample index inside a trajectory id.
const SAMPLE_BITS: u32 = 24;

fn trajectory_id(stream: u64, k: usize) -> u64 {
    (stream << SAMPLE_BITS) | k as u64
}

/// (X_cl(0), V_cl(0)) and the number of bounces on [0, t].
fn backward_to_zero(domain: &ConvexDomain, bc: BoundaryCondition, t: f64, x: &Vec3, v: &Vec3) -> Result<(Vec3, Vec3, usize)> {
    let cycle = build_cycle(domain, bc, &PhaseState::new(t, *x, *v), 0.0, DEFAULT_BOUNCE_CAP)?;
    let e = cycle.entries.last().expect("cycle has an initial entry");
    Ok((e.x - e.t * e.v, e.v, cycle.bounces()))
}

/// f(t, x, v): exact for deterministic boundary conditions, Monte-Carlo mean
/// over independent diffuse cycles otherwise.
pub fn free_transport_eval(problem: &TransportProblem, t: f64, x: &Vec3, v: &Vec3, mc: &TransportMc) -> Result<Estimate> {
    if t < 0.0 {
        return Err(KinError::ParameterViolation(format!("negative time {t}")));
    }
    let v = problem.domain.planar(v);
    if problem.bc.is_deterministic() {
        let (x0, v0, _) = backward_to_zero(&problem.domain, problem.bc, t, x, &v)?;
        let f = problem.f0.eval(&x0, &v0);
        let value = if problem.datum == problem.representation {
            f
        } else {
            f * problem.datum.weight(&v0) / problem.representation.weight(&v)
        };
        return Ok(Estimate { mean: value, stderr: 0.0, n: 1 });
    }
    let xs = diffuse_samples(problem, t, x, &v, mc.stream, mc.samples)?;
    let est = Estimate::of(&xs);
    let c = problem.ratio_to_output(1.0, &v);
    Ok(Estimate { mean: est.mean * c, stderr: est.stderr * c, n: est.n })
}

/// Per-sample g̃₀(X(0), V(0)) along diffuse cycles `0..samples` of `stream`.
fn diffuse_samples(problem: &TransportProblem, t: f64, x: &Vec3, v: &Vec3, stream: u64, samples: usize) -> Result<Vec<f64>> {
    (0..samples)
        .into_par_iter()
        .map(|k| diffuse_sample(problem, t, x, v, trajectory_id(stream, k)))
        .collect()
}

fn diffuse_sample(problem: &TransportProblem, t: f64, x: &Vec3, v: &Vec3, traj: u64) -> Result<f64> {
    let bc = problem.bc.with_trajectory(traj);
    let (x0, v0, _) = backward_to_zero(&problem.domain, bc, t, x, v)?;
    Ok(problem.ratio_datum(&x0, &v0))
}

/// Central-difference phase gradient with its Monte-Carlo standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseGradient {
    pub dx: Vec3,
    pub dv: Vec3,
    pub dx_stderr: Vec3,
    pub dv_stderr: Vec3,
    /// Step used per column (x₁..x₃, v₁..v₃).
    pub h: [f64; 6],
}

/// ∇ₓf and ∇ᵥf by central differences. Deterministic stencils that change
/// the bounce count are shrunk like trajectory Jacobians; diffuse stencils
/// reuse the same cycles at every point (common random numbers) and report
/// the paired standard error.
pub fn fd_phase_gradient(
    problem: &TransportProblem,
    t: f64,
    x: &Vec3,
    v: &Vec3,
    h: f64,
    mc: &TransportMc,
) -> Result<PhaseGradient> {
    use crate::jacobians::{MAX_STEP_SHRINKS, STEP_SHRINK};
    let domain = &problem.domain;
    let v = domain.planar(v);
    let mut out = PhaseGradient {
        dx: Vec3::zeros(),
        dv: Vec3::zeros(),
        dx_stderr: Vec3::zeros(),
        dv_stderr: Vec3::zeros(),
        h: [0.0; 6],
    };
    let base_bounces = if problem.bc.is_deterministic() {
        backward_to_zero(domain, problem.bc, t, x, &v)?.2
    } else {
        0
    };
    for col in 0..6 {
        let i = col % 3;
        if i >= domain.dim() {
            continue;
        }
        let mut hc = h;
        let mut tries = 0;
        loop {
            let e = Vec3::ith(i, hc);
            let (xp, xm, vp, vm) = if col < 3 { (x + e, x - e, v, v) } else { (*x, *x, v + e, v - e) };
            let (d, se) = if problem.bc.is_deterministic() {
                let (ap, bp, np) = backward_to_zero(domain, problem.bc, t, &xp, &vp)?;
                let (am, bm, nm) = backward_to_zero(domain, problem.bc, t, &xm, &vm)?;
                if np != base_bounces || nm != base_bounces {
                    tries += 1;
                    if tries > MAX_STEP_SHRINKS {
                        return Err(KinError::SegmentCrossing);
                    }
                    hc *= STEP_SHRINK;
                    continue;
                }
                let fp = problem.f0.eval(&ap, &bp) * problem.datum.weight(&bp) / problem.representation.weight(&vp);
                let fm = problem.f0.eval(&am, &bm) * problem.datum.weight(&bm) / problem.representation.weight(&vm);
                ((fp - fm) / (2.0 * hc), 0.0)
            } else {
                let gp = diffuse_samples(problem, t, &xp, &vp, mc.stream, mc.samples)?;
                let gm = diffuse_samples(problem, t, &xm, &vm, mc.stream, mc.samples)?;
                let (cp, cm) = (problem.ratio_to_output(1.0, &vp), problem.ratio_to_output(1.0, &vm));
                let diffs: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a * cp - b * cm) / (2.0 * hc)).collect();
                let e = Estimate::of(&diffs);
                (e.mean, e.stderr)
            };
            if col < 3 {
                out.dx[i] = d;
                out.dx_stderr[i] = se;
            } else {
                out.dv[i] = d;
                out.dv_stderr[i] = se;
            }
            out.h[col] = hc;
            break;
        }
    }
    Ok(out)
}

/// Settings of the diffuse boundary-integral experiment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryScanConfig {
    /// Boundary phase points (s, x, v).
    pub outer: usize,
    /// Diffuse cycles per stencil point; split into two independent halves.
    pub inner: usize,
    pub seed: u64,
    /// Upper end of the sampled normal speed.
    pub v_max: f64,
    /// Stencil step relative to |n·v|·radius.
    pub rel_step: f64,
}

impl Default for BoundaryScanConfig {
    fn default() -> Self {
        Self { outer: 31_250, inner: 32, seed: 0, v_max: 6.0, rel_step: 1e-3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryRow {
    pub delta: f64,
    pub value: f64,
    pub stderr: f64,
}

/// I(δ) for one exponent p, with per-sample contributions kept for paired
/// comparisons between truncation levels.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryScan {
    pub p: f64,
    pub rows: Vec<BoundaryRow>,
    /// Least-squares slope of I against ln(1/δ), with its sampling error.
    pub log_slope: Estimate,
    samples: Vec<Vec<f64>>,
}

impl BoundaryScan {
    /// I(δ_a) − I(δ_b) with the stderr of the paired difference.
    pub fn difference(&self, a: usize, b: usize) -> Estimate {
        let d: Vec<f64> = self.samples.iter().map(|s| s[a] - s[b]).collect();
        Estimate::of(&d)
    }
}

/// ∫₀ᵀ∫_{γ₋, |n·v|>δ, |v|<1/δ} |∇ₓf|ᵖ dγ ds for diffuse free transport on a
/// sphere, for every δ in `deltas` and every p in `ps`.
///
/// Boundary points are uniform in (s, x); the normal speed is log-uniform on
/// [min δ, v_max] and the tangential velocity standard normal, with the
/// density divided out. ∇ₓf uses a one-sided second-order difference along
/// the inward normal and central differences along the surface; the |∇ₓf|ᵖ
/// estimate is |ĝ_A·ĝ_B|^{p/2} (signed) for two independent half-sample
/// gradients, which is unbiased at p = 2.
pub fn boundary_lp_scan(
    problem: &TransportProblem,
    ps: &[f64],
    t_max: f64,
    deltas: &[f64],
    cfg: &BoundaryScanConfig,
) -> Result<Vec<BoundaryScan>> {
    let radius = match problem.domain.builtin() {
        Builtin::Sphere { r } => r,
        _ => return Err(KinError::ParameterViolation("boundary scan needs a sphere".into())),
    };
    if problem.bc.is_deterministic() {
        return Err(KinError::ParameterViolation("boundary scan needs diffuse reflection".into()));
    }
    if deltas.is_empty() || deltas.windows(2).any(|w| w[1] >= w[0]) || deltas.iter().any(|d| *d <= 0.0) {
        return Err(KinError::ParameterViolation("deltas must be positive and decreasing".into()));
    }
    if cfg.inner < 2 || !cfg.inner.is_multiple_of(2) || cfg.inner >= 1 << SAMPLE_BITS {
        return Err(KinError::ParameterViolation(format!("inner = {} must be even and ≥ 2", cfg.inner)));
    }
    let d_min = *deltas.last().expect("non-empty");
    let log_range = (cfg.v_max / d_min).ln();
    let area = 4.0 * PI * radius * radius;
    let per_sample: Vec<Vec<Vec<f64>>> = (0..cfg.outer)
        .into_par_iter()
        .map(|i| {
            let mut rng = crate::rng::stream(cfg.seed, &[0xB0, i as u64]);
            let s = t_max * rng.random::<f64>();
            let g = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
            let n = g.normalize();
            let x = n * radius;
            let (t1, t2) = tangent_basis(&n, 3);
            let vn = d_min * (log_range * rng.random::<f64>()).exp();
            let (a, b): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
            let v = -vn * n + a * t1 + b * t2;
            let inv_density = vn * log_range * 2.0 * PI * (0.5 * (a * a + b * b)).exp();
            let w = t_max * area * inv_density * vn;
            let (ga, gb) = boundary_gradient_halves(problem, s, &x, &v, radius, i as u64, cfg)?;
            let dot = ga.dot(&gb);
            let speed = v.norm();
            Ok(ps
                .iter()
                .map(|p| {
                    let val = dot.signum() * dot.abs().powf(0.5 * p) * w;
                    deltas.iter().map(|d| if vn > *d && speed < 1.0 / d { val } else { 0.0 }).collect()
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let xs: Vec<f64> = deltas.iter().map(|d| (1.0 / d).ln()).collect();
    let xbar = xs.iter().sum::<f64>() / xs.len() as f64;
    let sxx: f64 = xs.iter().map(|x| (x - xbar).powi(2)).sum();
    let coef: Vec<f64> = xs.iter().map(|x| if sxx > 0.0 { (x - xbar) / sxx } else { 0.0 }).collect();
    Ok(ps
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let samples: Vec<Vec<f64>> = per_sample.iter().map(|s| s[k].clone()).collect();
            let rows = deltas
                .iter()
                .enumerate()
                .map(|(j, &delta)| {
                    let col: Vec<f64> = samples.iter().map(|s| s[j]).collect();
                    let e = Estimate::of(&col);
                    BoundaryRow { delta, value: e.mean, stderr: e.stderr }
                })
                .collect();
            let slopes: Vec<f64> = samples.iter().map(|s| pairwise_sum(&s.iter().zip(&coef).map(|(a, c)| a * c).collect::<Vec<_>>())).collect();
            BoundaryScan { p, rows, log_slope: Estimate::of(&slopes), samples }
        })
        .collect())
}

/// Two independent estimates of ∇ₓf(s, x, v) at an incoming boundary point.
fn boundary_gradient_halves(
    problem: &TransportProblem,
    s: f64,
    x: &Vec3,
    v: &Vec3,
    radius: f64,
    outer: u64,
    cfg: &BoundaryScanConfig,
) -> Result<(Vec3, Vec3)> {
    let n = x / radius;
    let (t1, t2) = tangent_basis(&n, 3);
    let h = cfg.rel_step * n.dot(v).abs() * radius;
    let ang = h / radius;
    let rot = |t: &Vec3, sign: f64| (x * ang.cos() + t * (sign * radius * ang.sin())) * (radius / x.norm());
    let points = [*x, x - h * n, x - 2.0 * h * n, rot(&t1, 1.0), rot(&t1, -1.0), rot(&t2, 1.0), rot(&t2, -1.0)];
    let half = cfg.inner / 2;
    let c = problem.ratio_to_output(1.0, v);
    let mut grads = [Vec3::zeros(); 2];
    for (j, grad) in grads.iter_mut().enumerate() {
        let mut f = [0.0; 7];
        for (slot, p) in f.iter_mut().zip(&points) {
            let mut vals = Vec::with_capacity(half);
            for k in j * half..(j + 1) * half {
                let traj = (outer << SAMPLE_BITS) | k as u64;
                vals.push(diffuse_sample(problem, s, p, v, traj)?);
            }
            *slot = pairwise_sum(&vals) / half as f64 * c;
        }
        // Outward normal derivative from inside: (3f(x) − 4f(x − hn) + f(x − 2hn))/2h.
        let dn = (3.0 * f[0] - 4.0 * f[1] + f[2]) / (2.0 * h);
        let d1 = (f[3] - f[4]) / (2.0 * h);
        let d2 = (f[5] - f[6]) / (2.0 * h);
        *grad = dn * n + d1 * t1 + d2 * t2;
    }
    Ok((grads[0], grads[1]))
}

/// Grazing family of the blow-up scan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlowupScanConfig {
    pub alphas: Vec<f64>,
    /// Approximate evaluation time; adjusted per state so that time 0 sits
    /// at fraction `phase` of its bounce segment.
    pub t: f64,
    pub phase: f64,
    /// Polar angle of x (disk only).
    pub theta0: f64,
}

impl Default for BlowupScanConfig {
    fn default() -> Self {
        Self { alphas: crate::fit::log_space(1e-6, 1e-2, 9), t: 2.0, phase: 0.25, theta0: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlowupRow {
    pub alpha: f64,
    pub t: f64,
    pub dn_f: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlowupScan {
    pub rows: Vec<BlowupRow>,
    pub fit: Option<ScalingFit>,
}

/// |∂ₙf(t, x, v)| along a grazing approach, with n the outward normal
/// direction at x, and the fitted exponent against α(x, v). The unit disk
/// under specular reflection uses the closed-form cycle derivatives; other
/// deterministic cases use finite-difference trajectory Jacobians. Both need
/// the analytic gradient of f₀.
pub fn grazing_blowup_scan(problem: &TransportProblem, cfg: &BlowupScanConfig) -> Result<BlowupScan> {
    if !problem.bc.is_deterministic() {
        return Err(KinError::ParameterViolation("blow-up scan needs a deterministic boundary condition".into()));
    }
    let domain = &problem.domain;
    let disk = matches!(domain.builtin(), Builtin::Disk2D { .. }) && problem.bc == BoundaryCondition::Specular;
    let rows: Vec<BlowupRow> = cfg
        .alphas
        .par_iter()
        .map(|&a| {
            let (state, dx, dv) = if disk {
                let (st, s) = disk_grazing_state(a, cfg.theta0, cfg.t, cfg.t, cfg.phase)?;
                let st = PhaseState::new(st.t - s, st.x, st.v);
                let d = disk_normal_derivatives(domain, &st, 0.0)?;
                (st, d.dx_x, d.dx_v)
            } else {
                let st = crate::jacobians::grazing_family_state(domain, a, 1.0, cfg.t, cfg.phase)?;
                let j = fd_trajectory_jacobian(domain, problem.bc, &st, 0.0, FdStep::default())?;
                (st, j.dx_x(), j.dx_v())
            };
            let v = domain.planar(&state.v);
            let (x0, v0, _) = backward_to_zero(domain, problem.bc, state.t, &state.x, &v)?;
            let (gx, gv) = problem
                .f0
                .gradient(&x0, &v0)
                .ok_or_else(|| KinError::ParameterViolation("blow-up scan needs an analytic gradient of f0".into()))?;
            let n = domain.outward_normal(&state.x)?;
            let dn_f = chain(&gx, &gv, &dx, &dv, &n) * problem.datum.weight(&v0) / problem.representation.weight(&v);
            Ok(BlowupRow { alpha: crate::kinetic_distance::alpha(domain, &state.x, &v)?, t: state.t, dn_f: dn_f.abs() })
        })
        .collect::<Result<_>>()?;
    let alphas: Vec<f64> = rows.iter().map(|r| r.alpha).collect();
    let q: Vec<f64> = rows.iter().map(|r| r.dn_f).collect();
    Ok(BlowupScan { fit: scaling_fit(&alphas, &q), rows })
}

/// ∇ₓf₀·(∂X/∂n) + ∇ᵥf₀·(∂V/∂n) with ∂X/∂x = `dx`, ∂V/∂x = `dv`.
fn chain(gx: &Vec3, gv: &Vec3, dx: &Mat3, dv: &Mat3, n: &Vec3) -> f64 {
    gx.dot(&(dx * n)) + gv.dot(&(dv * n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sphere() -> ConvexDomain {
        ConvexDomain::sphere(1.0).unwrap()
    }

    fn problem(bc: BoundaryCondition, f0: Arc<dyn PhaseFunction>, repr: Representation) -> TransportProblem {
        TransportProblem::new(sphere(), bc, f0, repr)
    }

    #[test]
    fn bump_profile() {
        assert_eq!(bump(0.3), 1.0);
        assert_eq!(bump(0.5), 1.0);
        assert_eq!(bump(0.95), 0.0);
        assert_relative_eq!(bump(0.7), 0.5, epsilon = 1e-15);
        let xs: Vec<f64> = (0..100).map(|k| 0.5 + 0.004 * k as f64).collect();
        assert!(xs.windows(2).all(|w| bump(w[1]) <= bump(w[0])));
    }

    #[test]
    fn speed_is_transported_by_specular() {
        let p = problem(BoundaryCondition::Specular, Arc::new(SpeedSquared), Representation::DensityF);
        let v = Vec3::new(0.3, -1.1, 0.4);
        let e = free_transport_eval(&p, 7.5, &Vec3::new(0.2, 0.1, -0.3), &v, &TransportMc::default()).unwrap();
        assert_relative_eq!(e.mean, v.norm_squared(), max_relative = 1e-14);
        assert_eq!(e.stderr, 0.0);
    }

    #[test]
    fn diffuse_equilibrium_is_fixed() {
        let p = problem(BoundaryCondition::diffuse(3), Arc::new(Constant(1.0)), Representation::RatioOverMu);
        let e = free_transport_eval(&p, 3.0, &Vec3::new(0.5, 0.0, 0.1), &Vec3::new(1.0, 2.0, 0.0), &TransportMc::default())
            .unwrap();
        assert_eq!(e.mean, 1.0);
        assert_eq!(e.stderr, 0.0);
    }

    #[test]
    fn bounce_back_diameter() {
        // From the centre with |v| = 1 the cycle returns to the origin at time 0.
        let f0 = |x: &Vec3, v: &Vec3| (1.0 + x[0]) * v.norm_squared() + v[1] * v[1];
        let p = problem(BoundaryCondition::BounceBack, Arc::new(FnDatum(f0)), Representation::DensityF);
        let v = Vec3::new(1.0, 0.0, 0.0);
        let e = free_transport_eval(&p, 2.0, &Vec3::zeros(), &v, &TransportMc::default()).unwrap();
        assert_relative_eq!(e.mean, f0(&Vec3::zeros(), &v), epsilon = 1e-12);
    }

    #[test]
    fn representations_agree_exactly_for_specular() {
        let f0: Arc<dyn PhaseFunction> = Arc::new(FnDatum(|x: &Vec3, v: &Vec3| (x[0] + 2.0) * (-v.norm_squared()).exp()));
        let p = problem(BoundaryCondition::Specular, f0, Representation::DensityF);
        let (x, v) = (Vec3::new(0.1, 0.4, -0.2), Vec3::new(0.7, -0.2, 1.3));
        let mc = TransportMc::default();
        let dens = free_transport_eval(&p, 4.0, &x, &v, &mc).unwrap().mean;
        let ratio = free_transport_eval(&p.in_representation(Representation::RatioOverMu), 4.0, &x, &v, &mc).unwrap().mean;
        assert_relative_eq!(ratio * DiffuseLaw::mu(&v), dens, max_relative = 1e-14);
    }

    #[test]
    fn representations_agree_for_diffuse() {
        let f0: Arc<dyn PhaseFunction> = Arc::new(RadialBump);
        let p = problem(BoundaryCondition::diffuse(11), f0, Representation::RatioOverSqrtMu);
        let (x, v) = (Vec3::new(0.6, 0.2, 0.0), Vec3::new(0.8, 0.1, 0.2));
        let mc = TransportMc { samples: 4000, stream: 5 };
        let f = free_transport_eval(&p, 0.9, &x, &v, &mc).unwrap();
        let g = free_transport_eval(&p.in_representation(Representation::RatioOverMu), 0.9, &x, &v, &mc).unwrap();
        let d = free_transport_eval(&p.in_representation(Representation::DensityF), 0.9, &x, &v, &mc).unwrap();
        let mu = DiffuseLaw::mu(&v);
        // Same cycles, so the conversions are exact up to rounding.
        assert_relative_eq!(g.mean * mu, d.mean, max_relative = 1e-12);
        assert_relative_eq!(f.mean * mu.sqrt(), d.mean, max_relative = 1e-12);
        assert!(f.stderr > 0.0);
    }

    #[test]
    fn time_consistency_specular() {
        let p = problem(BoundaryCondition::Specular, Arc::new(TrigDatum { centre: Some(Vec3::new(0.5, 0.0, 0.0)) }), Representation::DensityF);
        let st = PhaseState::new(5.0, Vec3::new(0.3, -0.2, 0.1), Vec3::new(-0.4, 1.2, 0.5));
        let cycle = build_cycle(&p.domain, p.bc, &st, 0.0, DEFAULT_BOUNCE_CAP).unwrap();
        let mc = TransportMc::default();
        let direct = free_transport_eval(&p, st.t, &st.x, &st.v, &mc).unwrap().mean;
        for s in [0.7, 2.1, 3.3] {
            let (xs, vs) = cycle.eval(s).unwrap();
            let later = free_transport_eval(&p, s, &xs, &vs, &mc).unwrap().mean;
            assert!((later - direct).abs() <= 1e-9, "s = {s}: {later} vs {direct}");
        }
    }

    #[test]
    fn gradient_of_speed_vanishes_in_x() {
        let p = problem(BoundaryCondition::Specular, Arc::new(SpeedSquared), Representation::DensityF);
        let v = Vec3::new(0.2, 0.9, -0.3);
        let g = fd_phase_gradient(&p, 2.5, &Vec3::new(0.1, 0.2, 0.3), &v, 1e-5, &TransportMc::default()).unwrap();
        // Zero up to the rounding of |V_cl| across reflections, divided by h.
        assert!(g.dx.norm() <= 1e-9, "{:?}", g.dx);
        assert_relative_eq!(g.dv, 2.0 * v, max_relative = 1e-8);
    }

    #[test]
    fn gradient_matches_chain_rule_in_free_flight() {
        let datum = TrigDatum { centre: Some(Vec3::new(0.5, -0.2, 0.0)) };
        let p = problem(BoundaryCondition::Specular, Arc::new(datum), Representation::DensityF);
        let (t, x, v) = (0.3, Vec3::new(0.1, -0.2, 0.05), Vec3::new(0.6, 0.4, -0.3));
        let g = fd_phase_gradient(&p, t, &x, &v, 1e-5, &TransportMc::default()).unwrap();
        let (gx, gv) = datum.gradient(&(x - t * v), &v).unwrap();
        assert!((g.dx - gx).norm() <= 1e-5 * gx.norm());
        let want_v = gv - t * gx;
        assert!((g.dv - want_v).norm() <= 1e-5 * want_v.norm());
    }

    #[test]
    fn diffuse_gradient_of_equilibrium_is_zero() {
        let p = problem(BoundaryCondition::diffuse(2), Arc::new(Constant(1.0)), Representation::RatioOverMu);
        let g = fd_phase_gradient(&p, 2.0, &Vec3::new(0.2, 0.1, 0.0), &Vec3::new(1.0, 0.3, 0.2), 1e-4, &TransportMc { samples: 64, stream: 1 })
            .unwrap();
        assert_eq!(g.dx, Vec3::zeros());
        assert_eq!(g.dx_stderr, Vec3::zeros());
    }

    #[test]
    fn constant_datum_has_no_boundary_integral() {
        let p = problem(BoundaryCondition::diffuse(4), Arc::new(Constant(1.0)), Representation::RatioOverMu);
        let cfg = BoundaryScanConfig { outer: 64, inner: 4, ..Default::default() };
        let scans = boundary_lp_scan(&p, &[2.0], 1.0, &[0.125, 0.0625], &cfg).unwrap();
        for row in &scans[0].rows {
            assert_eq!(row.value, 0.0);
        }
    }

    #[test]
    fn boundary_scan_rejections() {
        let cfg = BoundaryScanConfig { outer: 4, inner: 4, ..Default::default() };
        let spec = problem(BoundaryCondition::Specular, Arc::new(RadialBump), Representation::RatioOverSqrtMu);
        assert!(boundary_lp_scan(&spec, &[2.0], 1.0, &[0.1], &cfg).is_err());
        let diff = problem(BoundaryCondition::diffuse(1), Arc::new(RadialBump), Representation::RatioOverSqrtMu);
        assert!(boundary_lp_scan(&diff, &[2.0], 1.0, &[0.1, 0.2], &cfg).is_err());
        assert!(boundary_lp_scan(&diff, &[2.0], 1.0, &[0.1], &BoundaryScanConfig { inner: 3, ..cfg }).is_err());
    }

    #[test]
    fn constant_datum_has_no_blowup() {
        let disk = ConvexDomain::disk2d(1.0).unwrap();
        let p = TransportProblem::new(disk, BoundaryCondition::Specular, Arc::new(Constant(2.0)), Representation::DensityF);
        let scan = grazing_blowup_scan(&p, &BlowupScanConfig::default()).unwrap();
        assert!(scan.rows.iter().all(|r| r.dn_f == 0.0));
    }

    #[test]
    fn blowup_needs_gradient() {
        let disk = ConvexDomain::disk2d(1.0).unwrap();
        let p = TransportProblem::new(disk, BoundaryCondition::Specular, Arc::new(RadialBump), Representation::DensityF);
        assert!(grazing_blowup_scan(&p, &BlowupScanConfig::default()).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn maximum_principle_deterministic(
                x in prop::array::uniform3(-0.5f64..0.5),
                v in prop::array::uniform3(-2.0f64..2.0),
                t in 0.0f64..6.0,
                bb in any::<bool>(),
            ) {
                let bc = if bb { BoundaryCondition::BounceBack } else { BoundaryCondition::Specular };
                let p = problem(bc, Arc::new(TrigDatum { centre: None }), Representation::DensityF);
                let v = Vec3::from(v);
                prop_assume!(v.norm() > 0.05);
                let f = free_transport_eval(&p, t, &Vec3::from(x), &v, &TransportMc::default()).unwrap().mean;
                prop_assert!((-1.0..=1.0).contains(&f));
            }

            #[test]
            fn maximum_principle_diffuse(
                x in prop::array::uniform3(-0.5f64..0.5),
                v in prop::array::uniform3(-2.0f64..2.0),
                t in 0.0f64..3.0,
            ) {
                let p = problem(BoundaryCondition::diffuse(9), Arc::new(RadialBump), Representation::RatioOverSqrtMu);
                let v = Vec3::from(v);
                prop_assume!(v.norm() > 0.05);
                let mc = TransportMc { samples: 64, stream: 0 };
                let g = p.in_representation(Representation::RatioOverMu);
                // 0 ≤ g̃₀ ≤ e^{1/4} on the support of the bump.
                let e = free_transport_eval(&g, t, &Vec3::from(x), &v, &mc).unwrap();
                prop_assert!(e.mean >= 0.0 && e.mean <= 0.25f64.exp());
            }
        }
    }
}
