//! Kinetic distance α(x, v) = |v·∇ξ|² − 2(v·∇²ξ·v) ξ and the Velocity Lemma.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::constants;
use crate::error::{KinError, Result};
use crate::geometry::{bracket, ConvexDomain, PhaseState};
use crate::trajectories::{build_cycle, BoundaryCondition, Cycle, DEFAULT_BOUNCE_CAP};
use crate::Vec3;

/// α below this (relative to |v|⁴) marks a grazing state in ratio tests.
pub const ALPHA_RATIO_FLOOR: f64 = 1e-14;
/// α floor used when sampling the ϖ quotient.
pub const VARPI_ALPHA_FLOOR: f64 = 1e-8;
/// Safety factor applied to the sampled ϖ maximum.
pub const VARPI_SAFETY: f64 = 1.1;

/// α, the decay rate ϖ and the weighted distance at one phase point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KineticWeight {
    pub alpha: f64,
    pub varpi: f64,
    pub weighted: f64,
    pub vl_constant: f64,
}

/// α(x, v). Round-off negatives down to −1e−14|v|⁴ are clamped to 0.
pub fn alpha(domain: &ConvexDomain, x: &Vec3, v: &Vec3) -> Result<f64> {
    let xi = domain.xi(x);
    if xi > domain.boundary_band() {
        return Err(KinError::OutsideDomain(xi));
    }
    Ok(alpha_unchecked(domain, x, v))
}

pub(crate) fn alpha_unchecked(domain: &ConvexDomain, x: &Vec3, v: &Vec3) -> f64 {
    let xi = domain.xi(x).min(0.0);
    let g = domain.grad_xi(x);
    let vg = v.dot(&g);
    let vhv = v.dot(&(domain.hess_xi(x) * v));
    let a = vg * vg - 2.0 * vhv * xi;
    if a < 0.0 && a >= -1e-14 * v.norm_squared().powi(2) {
        0.0
    } else {
        a
    }
}

/// v·∇ₓα = −2 (∇³ξ[v, v, v]) ξ.
pub fn transport_derivative_alpha(domain: &ConvexDomain, x: &Vec3, v: &Vec3) -> Result<f64> {
    let xi = domain.xi(x);
    if xi > domain.boundary_band() {
        return Err(KinError::OutsideDomain(xi));
    }
    Ok(-2.0 * domain.third_contract(x, v) * xi)
}

/// Result of the Monte-Carlo search for the ϖ threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarpiEstimate {
    /// Sample maximum times the safety factor.
    pub varpi: f64,
    pub sample_max: f64,
    pub argmax_x: [f64; 3],
    pub argmax_v: [f64; 3],
    pub skipped: usize,
}

/// ϖ threshold: 1.1 × the sampled max of 2∇³ξ[v,v,v]ξ / (α⟨v⟩) over
/// x ∈ Ω̄ and |v| ≤ `v_max`.
pub fn varpi_threshold(domain: &ConvexDomain, sample_count: usize, v_max: f64, seed: u64) -> VarpiEstimate {
    let mut est = VarpiEstimate {
        varpi: 0.0,
        sample_max: 0.0,
        argmax_x: [0.0; 3],
        argmax_v: [0.0; 3],
        skipped: 0,
    };
    if domain.is_quadratic() {
        return est;
    }
    let mut rng = crate::rng::stream(seed, &[0x7A]);
    for _ in 0..sample_count.max(1) {
        let x = domain.sample_closure(&mut rng);
        let speed = v_max * rng.random::<f64>().cbrt();
        let v = domain.random_direction(&mut rng) * speed;
        let a = alpha_unchecked(domain, &x, &v);
        if a < VARPI_ALPHA_FLOOR {
            est.skipped += 1;
            continue;
        }
        let q = 2.0 * domain.third_contract(&x, &v) * domain.xi(&x) / (a * bracket(&v));
        if q > est.sample_max {
            est.sample_max = q;
            est.argmax_x = [x[0], x[1], x[2]];
            est.argmax_v = [v[0], v[1], v[2]];
        }
    }
    est.varpi = VARPI_SAFETY * est.sample_max;
    est
}

/// α together with e^{−ϖ⟨v⟩t}α.
pub fn kinetic_weight(domain: &ConvexDomain, t: f64, x: &Vec3, v: &Vec3, varpi: f64) -> Result<KineticWeight> {
    let a = alpha(domain, x, v)?;
    Ok(KineticWeight {
        alpha: a,
        varpi,
        weighted: (-varpi * bracket(v) * t).exp() * a,
        vl_constant: constants::velocity_lemma_constant(domain),
    })
}

/// Two-time comparison of α along a deterministic cycle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocityLemmaCertificate {
    pub alpha1: f64,
    pub alpha2: f64,
    pub ratio: f64,
    pub implied_rate: f64,
    pub vl_constant: f64,
    pub pass: bool,
}

/// α(s₂)/α(s₁) and the rate |log ratio|/(|v||s₁ − s₂|) it implies.
pub fn velocity_lemma_certificate(
    domain: &ConvexDomain,
    cycle: &Cycle,
    s1: f64,
    s2: f64,
) -> Result<VelocityLemmaCertificate> {
    if !cycle.bc.is_deterministic() {
        return Err(KinError::ParameterViolation(
            "velocity lemma certificates need a deterministic cycle".into(),
        ));
    }
    let (x1, v1) = cycle.eval(s1)?;
    let a1 = alpha(domain, &x1, &v1)?;
    let speed = cycle.v().norm();
    if a1 < ALPHA_RATIO_FLOOR * speed.powi(4) {
        return Err(KinError::GrazingDegenerate(a1));
    }
    let (x2, v2) = cycle.eval(s2)?;
    let a2 = alpha(domain, &x2, &v2)?;
    let ratio = a2 / a1;
    let ds = (s1 - s2).abs();
    let implied_rate = if ds > 0.0 { ratio.ln().abs() / (speed * ds) } else { 0.0 };
    let vl_constant = constants::velocity_lemma_constant(domain);
    Ok(VelocityLemmaCertificate {
        alpha1: a1,
        alpha2: a2,
        ratio,
        implied_rate,
        vl_constant,
        pass: implied_rate <= vl_constant,
    })
}

/// α(s₁) below this marks a grazing sample in Velocity-Lemma runs.
pub const VL_GRAZING_FLOOR: f64 = 1e-10;

/// Random trajectories for Velocity-Lemma checks: x uniform in Ω̄, |v| =
/// `speed` with uniform direction, s₂ uniform in [0, horizon − gap] and
/// s₁ = s₂ + gap.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocityLemmaRunConfig {
    pub trajectories: usize,
    pub speed: f64,
    pub gap: f64,
    pub horizon: f64,
    pub seed: u64,
}

impl Default for VelocityLemmaRunConfig {
    fn default() -> Self {
        Self { trajectories: 10_000, speed: 1.0, gap: 0.5, horizon: 5.0, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocityLemmaRow {
    pub trajectory: usize,
    pub speed: f64,
    pub s1: f64,
    pub s2: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub implied_rate: f64,
    /// False for grazing samples (α(s₁) < [`VL_GRAZING_FLOOR`]), which are
    /// reported but not checked.
    pub checked: bool,
    pub pass: bool,
}

/// One certificate per random trajectory.
pub fn velocity_lemma_run(
    domain: &ConvexDomain,
    bc: BoundaryCondition,
    cfg: &VelocityLemmaRunConfig,
) -> Result<Vec<VelocityLemmaRow>> {
    use rayon::prelude::*;
    if cfg.gap <= 0.0 || cfg.gap >= cfg.horizon {
        return Err(KinError::ParameterViolation(format!(
            "gap {} must lie in (0, horizon = {})",
            cfg.gap, cfg.horizon
        )));
    }
    (0..cfg.trajectories)
        .into_par_iter()
        .map(|i| {
            let mut rng = crate::rng::stream(cfg.seed, &[0x71, i as u64]);
            let x = domain.sample_closure(&mut rng);
            let v = domain.random_direction(&mut rng) * cfg.speed;
            let s2 = (cfg.horizon - cfg.gap) * rng.random::<f64>();
            let s1 = s2 + cfg.gap;
            let cycle = build_cycle(domain, bc, &PhaseState::new(cfg.horizon, x, v), s2, DEFAULT_BOUNCE_CAP)?;
            let mut row = VelocityLemmaRow {
                trajectory: i,
                speed: cfg.speed,
                s1,
                s2,
                alpha1: f64::NAN,
                alpha2: f64::NAN,
                implied_rate: f64::NAN,
                checked: false,
                pass: false,
            };
            match velocity_lemma_certificate(domain, &cycle, s1, s2) {
                Ok(c) => {
                    row.alpha1 = c.alpha1;
                    row.alpha2 = c.alpha2;
                    row.implied_rate = c.implied_rate;
                    row.checked = c.alpha1 >= VL_GRAZING_FLOOR;
                    row.pass = c.pass;
                }
                Err(KinError::GrazingDegenerate(a)) => row.alpha1 = a,
                Err(KinError::AtBounceTime(_)) => {}
                Err(e) => return Err(e),
            }
            Ok(row)
        })
        .collect()
}

/// 99.9th percentile of the implied rate over the checked samples of a run,
/// times 1.2.
pub fn calibrate_velocity_lemma_constant(
    domain: &ConvexDomain,
    bc: BoundaryCondition,
    cfg: &VelocityLemmaRunConfig,
) -> Result<f64> {
    let mut rates: Vec<f64> = velocity_lemma_run(domain, bc, cfg)?
        .iter()
        .filter(|r| r.checked)
        .map(|r| r.implied_rate)
        .collect();
    if rates.is_empty() {
        return Err(KinError::ParameterViolation("no non-grazing samples".into()));
    }
    rates.sort_by(f64::total_cmp);
    let k = ((rates.len() as f64 * 0.999).ceil() as usize).clamp(1, rates.len()) - 1;
    Ok(1.2 * rates[k])
}

/// Largest |α − α₀|/α₀ along a cycle, with α₀ = α at the starting point.
/// α is sampled at every bounce point (with the post-bounce velocity) and at
/// every segment midpoint.
pub fn alpha_drift(domain: &ConvexDomain, cycle: &Cycle) -> f64 {
    let e0 = &cycle.entries[0];
    let a0 = alpha_unchecked(domain, &e0.x, &e0.v);
    let mut drift: f64 = 0.0;
    for (l, e) in cycle.entries.iter().enumerate() {
        let lo = cycle.entries.get(l + 1).map_or(cycle.s_min, |n| n.t);
        let mid = e.x - 0.5 * (e.t - lo) * e.v;
        for a in [alpha_unchecked(domain, &e.x, &e.v), alpha_unchecked(domain, &mid, &e.v)] {
            drift = drift.max((a - a0).abs() / a0);
        }
    }
    drift
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaDriftRow {
    pub trajectory: usize,
    pub alpha0: f64,
    pub bounces: usize,
    pub drift: f64,
}

/// α drift over random trajectories on [0, horizon], sampled as in
/// [`velocity_lemma_run`] (the gap is unused).
pub fn alpha_drift_run(
    domain: &ConvexDomain,
    bc: BoundaryCondition,
    cfg: &VelocityLemmaRunConfig,
) -> Result<Vec<AlphaDriftRow>> {
    use rayon::prelude::*;
    if !bc.is_deterministic() {
        return Err(KinError::ParameterViolation("α drift needs a deterministic boundary condition".into()));
    }
    (0..cfg.trajectories)
        .into_par_iter()
        .map(|i| {
            let mut rng = crate::rng::stream(cfg.seed, &[0x72, i as u64]);
            let x = domain.sample_closure(&mut rng);
            let v = domain.random_direction(&mut rng) * cfg.speed;
            let cycle = build_cycle(domain, bc, &PhaseState::new(cfg.horizon, x, v), 0.0, DEFAULT_BOUNCE_CAP)?;
            Ok(AlphaDriftRow {
                trajectory: i,
                alpha0: alpha_unchecked(domain, &x, &v),
                bounces: cycle.bounces(),
                drift: alpha_drift(domain, &cycle),
            })
        })
        .collect()
}
