//! Pieces of the hard-potential collision operator: the gain term Γ_gain, the
//! collision frequency ν and the Grad kernel envelope.
//!
//! μ(v) = e^{−|v|²/2} is unnormalised, so ∫μ = (2π)^{3/2}. The cross section is
//! B(v − u, ω) = |v − u|^κ q₀(cos θ) with cos θ = (v − u)·ω/|v − u|.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{KinError, Result};
use crate::quadrature::{gauss_legendre, integrate, QuadOptions};
use crate::stats::{mc_estimate, Estimate};
use crate::Vec3;

/// A scalar function of velocity.
pub type VelocityFn<'a> = &'a (dyn Fn(&Vec3) -> f64 + Sync);

/// Angular part q₀ of the cross section.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AngularCutoff {
    /// q₀ = |cos θ|.
    AbsCos,
    /// q₀ ≡ 1.
    One,
}

impl AngularCutoff {
    pub fn eval(self, cos_theta: f64) -> f64 {
        match self {
            Self::AbsCos => cos_theta.abs(),
            Self::One => 1.0,
        }
    }

    /// ∫_{S²} q₀ dω.
    pub fn sphere_integral(self) -> f64 {
        match self {
            Self::AbsCos => 2.0 * PI,
            Self::One => 4.0 * PI,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionParams {
    pub kappa: f64,
    pub q0: AngularCutoff,
    /// Gaussian exponent for weighted-norm checks, in (0, 1/4).
    pub theta_gauss: f64,
}

impl Default for CollisionParams {
    fn default() -> Self {
        Self { kappa: 1.0, q0: AngularCutoff::AbsCos, theta_gauss: 0.1 }
    }
}

impl CollisionParams {
    pub fn new(kappa: f64, q0: AngularCutoff) -> Result<Self> {
        let p = Self { kappa, q0, ..Self::default() };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(KinError::ParameterViolation(format!("kappa = {} outside [0, 1]", self.kappa)));
        }
        if !(self.theta_gauss > 0.0 && self.theta_gauss < 0.25) {
            return Err(KinError::ParameterViolation(format!(
                "theta_gauss = {} outside (0, 1/4)",
                self.theta_gauss
            )));
        }
        Ok(())
    }

    /// B(v − u, ω).
    pub fn cross_section(&self, rel: &Vec3, omega: &Vec3) -> f64 {
        let r = rel.norm();
        if r == 0.0 {
            return if self.kappa == 0.0 && self.q0 == AngularCutoff::One { 1.0 } else { 0.0 };
        }
        r.powf(self.kappa) * self.q0.eval(rel.dot(omega) / r)
    }
}

/// Post-collision velocities (u′, v′).
pub fn post_collision(v: &Vec3, u: &Vec3, omega: &Vec3) -> (Vec3, Vec3) {
    let c = (v - u).dot(omega);
    (u + omega * c, v - omega * c)
}

/// Monte-Carlo sample budget and seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub samples: usize,
    pub seed: u64,
    /// Stream id distinguishing independent estimates under one seed.
    pub stream: u64,
}

impl McConfig {
    pub fn new(samples: usize, seed: u64, stream: u64) -> Self {
        Self { samples, seed, stream }
    }
}

fn uniform_sphere<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    let z: f64 = rng.random_range(-1.0..1.0);
    let phi: f64 = rng.random_range(0.0..2.0 * PI);
    let s = (1.0 - z * z).max(0.0).sqrt();
    Vec3::new(s * phi.cos(), s * phi.sin(), z)
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, sd: f64) -> Vec3 {
    Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)) * sd
}

/// Γ_gain(f₁, f₂)(v) = ∫∫ B(v−u, ω) √μ(u) f₁(u′) f₂(v′) dω du.
///
/// u is drawn from the Gaussian proportional to √μ (variance 2), so the √μ
/// factor cancels against the sampling density; each sample averages the
/// antithetic pair ±u with a shared ω uniform on the sphere.
pub fn gamma_gain(
    f1: VelocityFn,
    f2: VelocityFn,
    v: &Vec3,
    params: &CollisionParams,
    mc: &McConfig,
) -> Result<Estimate> {
    params.validate()?;
    if mc.samples < 1000 {
        return Err(KinError::ParameterViolation("gamma_gain needs at least 10^3 samples".into()));
    }
    // (4π)^{3/2} from the u density, 4π from the ω density.
    let norm = (4.0 * PI).powf(1.5) * 4.0 * PI;
    let sd = 2f64.sqrt();
    mc_estimate(mc.samples, mc.seed, &[0x6761_696e, mc.stream], |rng| {
        let u = gaussian(rng, sd);
        let omega = uniform_sphere(rng);
        let mut acc = 0.0;
        for uu in [u, -u] {
            let b = params.cross_section(&(v - uu), &omega);
            if b != 0.0 {
                let (up, vp) = post_collision(v, &uu, &omega);
                acc += b * f1(&up) * f2(&vp);
            }
        }
        0.5 * norm * acc
    })
}

/// Angular and radial resolution for [`nu_loss`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadConfig {
    /// Gauss–Legendre nodes in the polar cosine at the first refinement level.
    pub polar_nodes: usize,
    /// Relative tolerance between successive refinement levels.
    pub rel_tol: f64,
    pub max_levels: usize,
    /// Radial cutoff of the shell integral.
    pub rho_max: f64,
}

impl Default for QuadConfig {
    fn default() -> Self {
        Self { polar_nodes: 16, rel_tol: 1e-6, max_levels: 5, rho_max: 40.0 }
    }
}

/// ν(√μ f)(v) = ∫∫ B(v−u, ω) √μ(u) f(u) dω du.
///
/// The ω integral is done analytically. The u integral runs in spherical shells
/// centred at v, where |v−u|^κ becomes the smooth radial factor ρ^κ; the shell
/// average uses a Gauss–Legendre × trapezoid product rule whose resolution is
/// doubled until two levels agree to `rel_tol`.
pub fn nu_loss(f: VelocityFn, v: &Vec3, params: &CollisionParams, quad: &QuadConfig) -> Result<f64> {
    params.validate()?;
    let ang = params.q0.sphere_integral();
    let integrand = |u: &Vec3| (-0.25 * u.norm_squared()).exp() * f(u);
    let axis = if v.norm() > 0.0 { v.normalize() } else { Vec3::z() };
    let (e1, e2) = crate::trajectories::tangent_basis(&axis, 3);
    let radial_opts = QuadOptions { abs_tol: 1e-300, rel_tol: 0.1 * quad.rel_tol, max_panels: 4000 };

    let level = |m: usize| -> Result<f64> {
        let (cx, cw) = gauss_legendre(m);
        let nphi = 2 * m;
        let shell = |rho: f64| -> f64 {
            let mut s = 0.0;
            for (c, w) in cx.iter().zip(&cw) {
                let st = (1.0 - c * c).sqrt();
                let mut ring = 0.0;
                for k in 0..nphi {
                    let phi = 2.0 * PI * k as f64 / nphi as f64;
                    let dir = axis * *c + (e1 * phi.cos() + e2 * phi.sin()) * st;
                    ring += integrand(&(v + dir * rho));
                }
                s += w * ring * 2.0 * PI / nphi as f64;
            }
            s * rho.powf(2.0 + params.kappa)
        };
        let breaks = [v.norm(), 0.5 * v.norm() + 2.0, v.norm() + 4.0];
        Ok(integrate(shell, 0.0, quad.rho_max + v.norm(), &breaks, radial_opts)?.0)
    };

    let mut m = quad.polar_nodes;
    let mut prev = level(m)?;
    for _ in 0..quad.max_levels {
        m *= 2;
        let next = level(m)?;
        if (next - prev).abs() <= quad.rel_tol * next.abs().max(f64::MIN_POSITIVE) || next == prev {
            return Ok(ang * next);
        }
        prev = next;
    }
    Err(KinError::QuadratureDivergence(format!("nu_loss did not stabilise at v = {v:?}")))
}

/// ν(μ)(v)√μ(v) at κ = 0, q₀ ≡ 1: the closed form 4π(2π)^{3/2} e^{−|v|²/4}.
pub fn equilibrium_gain_closed_form(v: &Vec3) -> f64 {
    4.0 * PI * (2.0 * PI).powf(1.5) * (-0.25 * v.norm_squared()).exp()
}

/// Envelope of the linearised collision kernels,
/// k(v, u) = e^{−ϱ|v−u|² − ϱ(|v|²−|u|²)²/|v−u|²} / |v−u|^{2−κ}.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelBound {
    pub kappa: f64,
    pub zeta: f64,
    pub rho: f64,
}

impl Default for KernelBound {
    fn default() -> Self {
        Self { kappa: 1.0, zeta: 0.0, rho: 0.1 }
    }
}

impl KernelBound {
    pub fn eval(&self, v: &Vec3, u: &Vec3) -> f64 {
        let d2 = (v - u).norm_squared();
        if d2 == 0.0 {
            return f64::INFINITY;
        }
        let e = v.norm_squared() - u.norm_squared();
        (-self.rho * d2 - self.rho * e * e / d2).exp() / d2.powf(1.0 - 0.5 * self.kappa)
    }
}

/// Weighted kernel integral and its product with ⟨v⟩.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelIntegral {
    pub integral: f64,
    pub product_with_bracket_v: f64,
}

/// I(v) = ∫ (|v−u|^κ + |v−u|^{κ−2}) e^{−ϱ|v−u|² − ϱ(|v|²−|u|²)²/|v−u|²}
///        ⟨v⟩^ζ e^{θ|v|²} / (⟨u⟩^ζ e^{θ|u|²}) du.
///
/// With η = v − u = ρω̂ and c = ω̂·v̂ the integrand depends on (ρ, c) only:
/// |v|² − |u|² = ρ(2|v|c − ρ), so the φ integral gives 2π and the ρ² area
/// element cancels the diagonal singularity.
pub fn kernel_integral_check(v: &Vec3, bound: &KernelBound, theta: f64) -> Result<KernelIntegral> {
    let rho_g = bound.rho;
    if !(theta > -2.0 * rho_g && theta < 2.0 * rho_g) {
        return Err(KinError::ParameterViolation(format!(
            "theta = {theta} outside (-2 rho, 2 rho) with rho = {rho_g}"
        )));
    }
    let s = v.norm();
    let kappa = bound.kappa;
    let zeta = bound.zeta;
    let opts = QuadOptions { abs_tol: 1e-300, rel_tol: 1e-10, max_panels: 4000 };
    let outer = |r: f64| -> f64 {
        if r == 0.0 {
            return 0.0;
        }
        let inner = |c: f64| -> f64 {
            let q = 2.0 * s * c - r;
            let u2 = (s * s - 2.0 * s * r * c + r * r).max(0.0);
            let weight = ((1.0 + s * s) / (1.0 + u2)).powf(0.5 * zeta) * (theta * (s * s - u2)).exp();
            (-rho_g * r * r - rho_g * q * q).exp() * weight
        };
        let mut breaks = vec![];
        if s > 0.0 {
            let c0 = r / (2.0 * s);
            let w = 1.0 / (2.0 * s * rho_g.sqrt());
            breaks.extend([c0 - w, c0, c0 + w]);
        }
        let ang = integrate(inner, -1.0, 1.0, &breaks, opts).map(|x| x.0).unwrap_or(f64::NAN);
        2.0 * PI * r * r * (r.powf(kappa) + r.powf(kappa - 2.0)) * ang
    };
    let r_max = 40.0 + 2.0 * s;
    let (integral, _) = integrate(outer, 0.0, r_max, &[1.0, s, 2.0 * s], opts)?;
    if !integral.is_finite() {
        return Err(KinError::QuadratureDivergence("kernel integral".into()));
    }
    Ok(KernelIntegral { integral, product_with_bracket_v: (1.0 + s * s).sqrt() * integral })
}

/// Speeds |v| of the kernel-bound scan.
pub const KERNEL_SCAN_SPEEDS: [f64; 5] = [0.0, 1.0, 2.0, 4.0, 8.0];

/// Moment weight ψ for the conservation checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Moment {
    Mass,
    Momentum(usize),
    Energy,
}

impl Moment {
    pub const ALL: [Moment; 5] = [Moment::Mass, Moment::Momentum(0), Moment::Momentum(1), Moment::Momentum(2), Moment::Energy];

    pub fn eval(self, v: &Vec3) -> f64 {
        match self {
            Self::Mass => 1.0,
            Self::Momentum(i) => v[i],
            Self::Energy => v.norm_squared(),
        }
    }

    pub fn name(self) -> String {
        match self {
            Self::Mass => "mass".into(),
            Self::Momentum(i) => format!("momentum_{}", i + 1),
            Self::Energy => "energy".into(),
        }
    }
}

/// ∫ Q(F, F) ψ dv by the paired estimator: (u, v) standard Gaussian, ω uniform,
/// and each sample carries gain minus loss of the same collision.
pub fn collision_moment(
    f: VelocityFn,
    psi: Moment,
    params: &CollisionParams,
    mc: &McConfig,
) -> Result<Estimate> {
    params.validate()?;
    let gauss = |x: &Vec3| (2.0 * PI).powf(-1.5) * (-0.5 * x.norm_squared()).exp();
    mc_estimate(mc.samples, mc.seed, &[0x006d_6f6d, mc.stream], |rng| {
        let v = gaussian(rng, 1.0);
        let u = gaussian(rng, 1.0);
        let omega = uniform_sphere(rng);
        let b = params.cross_section(&(v - u), &omega);
        if b == 0.0 {
            return 0.0;
        }
        let (up, vp) = post_collision(&v, &u, &omega);
        4.0 * PI * b * (f(&up) * f(&vp) - f(&u) * f(&v)) * psi.eval(&v) / (gauss(&u) * gauss(&v))
    })
}

/// Smooth perturbation of the Maxwellian used by the moment checks.
pub fn perturbed_maxwellian(v: &Vec3) -> f64 {
    let mu = (-0.5 * v.norm_squared()).exp();
    mu * (1.0 + 0.2 * v[0] + 0.1 * (v.norm_squared() - 3.0) + 0.15 * v[1].sin() * v[2])
}
