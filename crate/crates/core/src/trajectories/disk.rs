//! Closed-form specular cycles of a disk.
//!
//! In polar coordinates x = r(cos θ, sin θ), with the velocity split into a
//! radial part v_n = v·x̂ and an angular part v_θ, the angular momentum
//! r v_θ is conserved and every chord after the first has the same length.
//! With D = v_n² + (1 − r²) v_θ² (unit disk):
//!
//! ```text
//! tℓ = t − (r v_n + (2ℓ − 1)√D) / |v|²
//! θℓ = θ − σ (asin(v_n/|v|) + a) − 2(ℓ − 1) σ a,   a = acos(r|v_θ|/|v|)
//! ψℓ = ψ⁰ − 2ℓ σ a
//! ```
//!
//! where σ is the sign of v_θ and ψ the polar angle of the velocity.

use crate::dual::Dual;
use crate::error::{KinError, Result};
use crate::geometry::{Builtin, ConvexDomain, PhaseState};
use crate::trajectories::{BoundaryCondition, Cycle, CycleEntry};
use crate::Vec3;

/// Derivative directions: (x₁, x₂, v₁, v₂).
pub type D4 = Dual<4>;

/// Closed-form specular cycle of a state in a disk of radius `radius`.
#[derive(Clone, Copy, Debug)]
pub struct DiskCycle {
    pub radius: f64,
    pub t: f64,
    x: [D4; 2],
    v: [D4; 2],
}

/// One closed-form bounce with derivatives in (x₁, x₂, v₁, v₂).
#[derive(Clone, Copy, Debug)]
pub struct DiskBounce {
    /// tℓ − t (depends on x and v only).
    pub dt: D4,
    pub theta: D4,
    pub psi: D4,
    pub speed: D4,
}

impl DiskCycle {
    pub fn new(domain: &ConvexDomain, state: &PhaseState) -> Result<Self> {
        let radius = match domain.builtin() {
            Builtin::Disk2D { r } => r,
            _ => {
                return Err(KinError::ParameterViolation(
                    "closed-form disk cycle needs a Disk2D domain".into(),
                ))
            }
        };
        if state.x[0] == 0.0 && state.x[1] == 0.0 {
            return Err(KinError::CenterDegenerate);
        }
        if state.v[0] == 0.0 && state.v[1] == 0.0 {
            return Err(KinError::NoExit);
        }
        let x = [
            D4::var(state.x[0] / radius, 0).scale_eps(1.0 / radius),
            D4::var(state.x[1] / radius, 1).scale_eps(1.0 / radius),
        ];
        let v = [D4::var(state.v[0], 2), D4::var(state.v[1], 3)];
        Ok(Self { radius, t: state.t, x, v })
    }

    fn polar(&self) -> Polar {
        let [x1, x2] = self.x;
        let [v1, v2] = self.v;
        let r = (x1 * x1 + x2 * x2).sqrt();
        let (c, s) = (x1 / r, x2 / r);
        let vn = v1 * c + v2 * s;
        let vt = v2 * c - v1 * s;
        let sp2 = v1 * v1 + v2 * v2;
        let sp = sp2.sqrt();
        let disc = vn * vn + (D4::constant(1.0) - r * r) * vt * vt;
        let sigma = if vt.re >= 0.0 { 1.0 } else { -1.0 };
        Polar {
            r,
            theta: x2.atan2(x1),
            vn,
            sp2,
            sp,
            sqrt_d: disc.sqrt(),
            sigma,
            chord_angle: (r * vt.abs() / sp).acos(),
            psi0: v2.atan2(v1),
        }
    }

    /// Closed form of bounce ℓ ≥ 1.
    pub fn bounce(&self, ell: usize) -> DiskBounce {
        assert!(ell >= 1, "bounce index starts at 1");
        let p = self.polar();
        let l = ell as f64;
        let dt = -((p.r * p.vn + p.sqrt_d * (2.0 * l - 1.0)) / p.sp2).scale(self.radius);
        let asn = (p.vn / p.sp).asin();
        let theta = p.theta - (asn + p.chord_angle).scale(p.sigma)
            - p.chord_angle.scale(2.0 * (l - 1.0) * p.sigma);
        let psi = p.psi0 - p.chord_angle.scale(2.0 * l * p.sigma);
        DiskBounce { dt, theta, psi, speed: p.sp }
    }

    /// Time between consecutive bounces after the first.
    pub fn gap(&self) -> f64 {
        let p = self.polar();
        2.0 * self.radius * p.sqrt_d.re / p.sp2.re
    }

    /// Grazing ratio |vℓ·n(xℓ)|/|v| shared by every bounce.
    pub fn grazing_ratio(&self) -> f64 {
        let p = self.polar();
        p.sqrt_d.re / p.sp.re
    }

    /// ℓ_* with t^{ℓ_*+1} ≤ s < t^{ℓ_*}.
    pub fn segment_index(&self, s: f64) -> usize {
        let t1 = self.t + self.bounce(1).dt.re;
        if s >= t1 {
            0
        } else {
            ((t1 - s) / self.gap()).floor() as usize + 1
        }
    }

    pub fn position(&self, b: &DiskBounce) -> Vec3 {
        Vec3::new(self.radius * b.theta.re.cos(), self.radius * b.theta.re.sin(), 0.0)
    }

    pub fn velocity(&self, b: &DiskBounce) -> Vec3 {
        Vec3::new(b.speed.re * b.psi.re.cos(), b.speed.re * b.psi.re.sin(), 0.0)
    }
}

struct Polar {
    r: D4,
    theta: D4,
    vn: D4,
    sp2: D4,
    sp: D4,
    sqrt_d: D4,
    sigma: f64,
    chord_angle: D4,
    psi0: D4,
}

/// Specular cycle of a disk state from the closed form, down to `s_min`.
pub fn disk_specular_cycle(
    domain: &ConvexDomain,
    state: &PhaseState,
    s_min: f64,
    cap: usize,
) -> Result<Cycle> {
    let dc = DiskCycle::new(domain, state)?;
    let v0 = domain.planar(&state.v);
    let xi = domain.xi(&state.x);
    let r0 = if xi.abs() <= domain.boundary_band() {
        domain.outward_normal(&state.x)?.dot(&v0).abs() / v0.norm()
    } else {
        f64::NAN
    };
    let mut entries = vec![CycleEntry { t: state.t, x: state.x, v: v0, r: r0 }];
    let ratio = dc.grazing_ratio();
    for ell in 1.. {
        let b = dc.bounce(ell);
        let t = state.t + b.dt.re;
        if t < s_min {
            break;
        }
        if ell > cap {
            let partial = Cycle { bc: BoundaryCondition::Specular, entries, s_min };
            return Err(KinError::BounceCapExceeded { cap, partial: Box::new(partial) });
        }
        entries.push(CycleEntry { t, x: dc.position(&b), v: dc.velocity(&b), r: ratio });
    }
    Ok(Cycle { bc: BoundaryCondition::Specular, entries, s_min })
}
