//! Strictly convex domains described by a level-set function.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{KinError, Result};
use crate::{Mat3, Vec3};

/// Gradient norm below which the normal is undefined.
pub const GRAD_FLOOR: f64 = 1e-12;
/// |n·v| below which a boundary state is grazing.
pub const GRAZING_BAND: f64 = 1e-12;
/// Default |ξ| band that counts as "on the boundary".
pub const DEFAULT_BOUNDARY_BAND: f64 = 1e-10;

/// A user-supplied level-set function with analytic derivatives.
pub trait LevelSet: Send + Sync {
    fn xi(&self, x: &Vec3) -> f64;
    fn grad(&self, x: &Vec3) -> Vec3;
    fn hess(&self, x: &Vec3) -> Mat3;
    /// `third(x)[i]` is the matrix `∂_i ∇²ξ(x)`.
    fn third(&self, x: &Vec3) -> [Mat3; 3];
}

/// Builtin tag of a domain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Builtin {
    Sphere { r: f64 },
    Ellipsoid { a: f64, b: f64, c: f64 },
    Disk2D { r: f64 },
    QuarticBall { lambda: f64 },
    Custom,
}

#[derive(Clone)]
enum Shape {
    Sphere(f64),
    Ellipsoid([f64; 3]),
    Disk(f64),
    Quartic(f64),
    Custom(Arc<dyn LevelSet>),
}

/// Ω = {ξ < 0}. Immutable after construction.
#[derive(Clone)]
pub struct ConvexDomain {
    shape: Shape,
    dim: usize,
    c_xi: f64,
    radius: f64,
    band: f64,
}

impl fmt::Debug for ConvexDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConvexDomain")
            .field("builtin", &self.builtin())
            .field("dim", &self.dim)
            .field("c_xi", &self.c_xi)
            .finish()
    }
}

/// Where a boundary phase point sits relative to the grazing set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum GammaRegion {
    Incoming,
    Outgoing,
    Grazing,
    NearGrazingOrFast(f64),
}

/// Backward exit data of the ray `x - s v`, `s ≥ 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExitData {
    pub t_b: f64,
    pub x_b: Vec3,
    pub normal_at_exit: Vec3,
    pub incidence: f64,
}

/// A point `(t, x, v)` of phase space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseState {
    pub t: f64,
    pub x: Vec3,
    pub v: Vec3,
}

impl PhaseState {
    pub fn new(t: f64, x: Vec3, v: Vec3) -> Self {
        Self { t, x, v }
    }

    pub fn bracket_v(&self) -> f64 {
        bracket(&self.v)
    }
}

/// ⟨v⟩ = √(1 + |v|²).
pub fn bracket(v: &Vec3) -> f64 {
    (1.0 + v.norm_squared()).sqrt()
}

impl ConvexDomain {
    pub fn sphere(r: f64) -> Result<Self> {
        positive("sphere radius", r)?;
        Ok(Self {
            shape: Shape::Sphere(r),
            dim: 3,
            c_xi: 2.0,
            radius: r,
            band: DEFAULT_BOUNDARY_BAND * r * r,
        })
    }

    pub fn ellipsoid(a: f64, b: f64, c: f64) -> Result<Self> {
        for s in [a, b, c] {
            positive("ellipsoid semi-axis", s)?;
        }
        let m = a.max(b).max(c);
        Ok(Self {
            shape: Shape::Ellipsoid([a, b, c]),
            dim: 3,
            c_xi: 2.0 / (m * m),
            radius: m,
            band: DEFAULT_BOUNDARY_BAND,
        })
    }

    pub fn disk2d(r: f64) -> Result<Self> {
        positive("disk radius", r)?;
        Ok(Self {
            shape: Shape::Disk(r),
            dim: 2,
            c_xi: 2.0,
            radius: r,
            band: DEFAULT_BOUNDARY_BAND * r * r,
        })
    }

    /// ξ = |x|² + λ Σ xᵢ⁴ − 1.
    pub fn quartic_ball(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(KinError::ParameterViolation(format!(
                "quartic coefficient must be >= 0, got {lambda}"
            )));
        }
        Ok(Self {
            shape: Shape::Quartic(lambda),
            dim: 3,
            c_xi: 2.0,
            radius: 1.0,
            band: DEFAULT_BOUNDARY_BAND,
        })
    }

    /// Custom domain contained in the ball of radius `bounding_radius`.
    ///
    /// The convexity constant is estimated on a sample of points of Ω̄, and
    /// the supplied derivatives are checked against finite differences.
    pub fn custom(
        level_set: Arc<dyn LevelSet>,
        dim: usize,
        bounding_radius: f64,
    ) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(KinError::ParameterViolation(format!("dim must be 2 or 3, got {dim}")));
        }
        positive("bounding radius", bounding_radius)?;
        let mut dom = Self {
            shape: Shape::Custom(level_set),
            dim,
            c_xi: 0.0,
            radius: bounding_radius,
            band: DEFAULT_BOUNDARY_BAND,
        };
        let mut rng = crate::rng::stream(0, &[0xC0DE]);
        let mut c_min = f64::INFINITY;
        for _ in 0..2000 {
            let x = dom.sample_closure(&mut rng);
            let h = dom.hess_xi(&x);
            let h = if dim == 2 { h.fixed_view::<2, 2>(0, 0).into_owned().symmetric_eigenvalues().min() } else { h.symmetric_eigenvalues().min() };
            c_min = c_min.min(h);
            dom.check_derivatives(&x)?;
        }
        if c_min <= 0.0 {
            return Err(KinError::ParameterViolation(format!(
                "level set is not uniformly convex on the sample (min eigenvalue {c_min:e})"
            )));
        }
        dom.c_xi = c_min;
        Ok(dom)
    }

    /// Replace the on-boundary tolerance band.
    pub fn with_boundary_band(mut self, band: f64) -> Self {
        self.band = band;
        self
    }

    pub fn builtin(&self) -> Builtin {
        match &self.shape {
            Shape::Sphere(r) => Builtin::Sphere { r: *r },
            Shape::Ellipsoid([a, b, c]) => Builtin::Ellipsoid { a: *a, b: *b, c: *c },
            Shape::Disk(r) => Builtin::Disk2D { r: *r },
            Shape::Quartic(l) => Builtin::QuarticBall { lambda: *l },
            Shape::Custom(_) => Builtin::Custom,
        }
    }

    pub fn name(&self) -> String {
        match self.builtin() {
            Builtin::Sphere { r } => format!("sphere({r})"),
            Builtin::Ellipsoid { a, b, c } => format!("ellipsoid({a},{b},{c})"),
            Builtin::Disk2D { r } => format!("disk2d({r})"),
            Builtin::QuarticBall { lambda } => format!("quartic({lambda})"),
            Builtin::Custom => "custom".to_string(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn c_xi(&self) -> f64 {
        self.c_xi
    }

    pub fn diameter(&self) -> f64 {
        2.0 * self.radius
    }

    pub fn boundary_band(&self) -> f64 {
        self.band
    }

    /// True when ξ is a quadratic polynomial, so ∇³ξ ≡ 0.
    pub fn is_quadratic(&self) -> bool {
        match self.shape {
            Shape::Sphere(_) | Shape::Ellipsoid(_) | Shape::Disk(_) => true,
            Shape::Quartic(l) => l == 0.0,
            Shape::Custom(_) => false,
        }
    }

    pub fn xi(&self, x: &Vec3) -> f64 {
        match &self.shape {
            Shape::Sphere(r) => x.norm_squared() - r * r,
            Shape::Ellipsoid(ax) => {
                (x[0] / ax[0]).powi(2) + (x[1] / ax[1]).powi(2) + (x[2] / ax[2]).powi(2) - 1.0
            }
            Shape::Disk(r) => x[0] * x[0] + x[1] * x[1] - r * r,
            Shape::Quartic(l) => {
                x.norm_squared() + l * (x[0].powi(4) + x[1].powi(4) + x[2].powi(4)) - 1.0
            }
            Shape::Custom(c) => c.xi(x),
        }
    }

    pub fn grad_xi(&self, x: &Vec3) -> Vec3 {
        match &self.shape {
            Shape::Sphere(_) => 2.0 * x,
            Shape::Ellipsoid(ax) => Vec3::new(
                2.0 * x[0] / (ax[0] * ax[0]),
                2.0 * x[1] / (ax[1] * ax[1]),
                2.0 * x[2] / (ax[2] * ax[2]),
            ),
            Shape::Disk(_) => Vec3::new(2.0 * x[0], 2.0 * x[1], 0.0),
            Shape::Quartic(l) => x.map(|c| 2.0 * c + 4.0 * l * c * c * c),
            Shape::Custom(c) => c.grad(x),
        }
    }

    pub fn hess_xi(&self, x: &Vec3) -> Mat3 {
        match &self.shape {
            Shape::Sphere(_) => Mat3::identity() * 2.0,
            Shape::Ellipsoid(ax) => Mat3::from_diagonal(&Vec3::new(
                2.0 / (ax[0] * ax[0]),
                2.0 / (ax[1] * ax[1]),
                2.0 / (ax[2] * ax[2]),
            )),
            Shape::Disk(_) => Mat3::from_diagonal(&Vec3::new(2.0, 2.0, 0.0)),
            Shape::Quartic(l) => Mat3::from_diagonal(&x.map(|c| 2.0 + 12.0 * l * c * c)),
            Shape::Custom(c) => c.hess(x),
        }
    }

    /// `third_xi(x)[i] = ∂_i ∇²ξ(x)`.
    pub fn third_xi(&self, x: &Vec3) -> [Mat3; 3] {
        match &self.shape {
            Shape::Quartic(l) => {
                let mut t = [Mat3::zeros(); 3];
                for (i, m) in t.iter_mut().enumerate() {
                    m[(i, i)] = 24.0 * l * x[i];
                }
                t
            }
            Shape::Custom(c) => c.third(x),
            _ => [Mat3::zeros(); 3],
        }
    }

    /// Σᵢⱼₖ vᵢ vⱼ vₖ ∂ᵢⱼₖ ξ(x).
    pub fn third_contract(&self, x: &Vec3, v: &Vec3) -> f64 {
        match &self.shape {
            Shape::Quartic(l) => 24.0 * l * (0..3).map(|i| x[i] * v[i].powi(3)).sum::<f64>(),
            Shape::Custom(c) => {
                let t = c.third(x);
                (0..3).map(|i| v[i] * v.dot(&(t[i] * v))).sum()
            }
            _ => 0.0,
        }
    }

    fn check_derivatives(&self, x: &Vec3) -> Result<()> {
        let h = 1e-5 * self.radius.max(1.0);
        let g = self.grad_xi(x);
        let hm = self.hess_xi(x);
        let t = self.third_xi(x);
        let scale = 1.0 + g.norm() + hm.norm();
        for i in 0..self.dim {
            let mut e = Vec3::zeros();
            e[i] = h;
            let (p, m) = (x + e, x - e);
            let dg = (self.xi(&p) - self.xi(&m)) / (2.0 * h);
            let dh = (self.grad_xi(&p) - self.grad_xi(&m)) / (2.0 * h);
            let dt = (self.hess_xi(&p) - self.hess_xi(&m)) / (2.0 * h);
            let ok = (dg - g[i]).abs() <= 1e-5 * scale
                && (dh - hm.column(i)).norm() <= 1e-5 * scale
                && (dt - t[i]).norm() <= 1e-4 * scale;
            if !ok {
                return Err(KinError::ParameterViolation(format!(
                    "custom level-set derivatives disagree with finite differences at {:?}",
                    [x[0], x[1], x[2]]
                )));
            }
        }
        Ok(())
    }

    fn in_closure(&self, x: &Vec3) -> bool {
        self.xi(x) <= self.band
    }

    fn require_closure(&self, x: &Vec3) -> Result<f64> {
        let xi = self.xi(x);
        if xi > self.band {
            Err(KinError::OutsideDomain(xi))
        } else {
            Ok(xi)
        }
    }

    /// n(x) = ∇ξ/|∇ξ|.
    pub fn outward_normal(&self, x: &Vec3) -> Result<Vec3> {
        let g = self.grad_xi(x);
        let n = g.norm();
        if n <= GRAD_FLOOR {
            return Err(KinError::DegenerateGradient([x[0], x[1], x[2]]));
        }
        Ok(g / n)
    }

    /// Backward exit time `t_b(x, v) = sup{s ≥ 0 : x − τ v ∈ Ω for τ ∈ (0, s)}`.
    pub fn backward_exit_time(&self, x: &Vec3, v: &Vec3) -> Result<ExitData> {
        let v = self.planar(v);
        if v.norm_squared() == 0.0 {
            return Err(KinError::NoExit);
        }
        let xi0 = self.require_closure(x)?;
        let t_b = match &self.shape {
            Shape::Sphere(_) => quadratic_exit(v.norm_squared(), x.dot(&v), xi0.min(0.0)),
            Shape::Disk(_) => {
                let xp = Vec3::new(x[0], x[1], 0.0);
                quadratic_exit(v.norm_squared(), xp.dot(&v), xi0.min(0.0))
            }
            Shape::Ellipsoid(ax) => {
                let w = Vec3::new(1.0 / (ax[0] * ax[0]), 1.0 / (ax[1] * ax[1]), 1.0 / (ax[2] * ax[2]));
                let a = v.component_mul(&v).dot(&w);
                let b = x.component_mul(&v).dot(&w);
                quadratic_exit(a, b, xi0.min(0.0))
            }
            _ => self.newton_exit(x, &v, xi0)?,
        };
        let x_b = x - t_b * v;
        let n = self.outward_normal(&x_b)?;
        Ok(ExitData {
            t_b,
            x_b,
            normal_at_exit: n,
            incidence: n.dot(&v),
        })
    }

    /// Drop the out-of-plane component for planar domains.
    pub fn planar(&self, v: &Vec3) -> Vec3 {
        if self.dim == 2 {
            Vec3::new(v[0], v[1], 0.0)
        } else {
            *v
        }
    }

    /// Largest root of the convex function `g(s) = ξ(x − s v)`.
    fn newton_exit(&self, x: &Vec3, v: &Vec3, xi0: f64) -> Result<f64> {
        let g = |s: f64| self.xi(&(x - s * v));
        let dg = |s: f64| -v.dot(&self.grad_xi(&(x - s * v)));
        let d2g = |s: f64| v.dot(&(self.hess_xi(&(x - s * v)) * v));
        let hi = (self.diameter() + 1.0) / v.norm();
        let lo = if xi0 < 0.0 {
            0.0
        } else {
            // Starting on the boundary: the ray re-enters only if g decreases first.
            if dg(0.0) >= 0.0 {
                return Ok(0.0);
            }
            let m = monotone_root(dg, d2g, 0.0, hi);
            if g(m) >= 0.0 {
                return Ok(0.0);
            }
            m
        };
        Ok(monotone_root(g, dg, lo, hi))
    }

    /// Tag of a boundary phase point; ε controls the near-grazing/fast band.
    pub fn classify(&self, x: &Vec3, v: &Vec3, eps: f64) -> Result<GammaRegion> {
        let xi = self.xi(x);
        if xi.abs() > self.band {
            return Err(KinError::NotOnBoundary(xi));
        }
        let nv = self.outward_normal(x)?.dot(v);
        Ok(if nv.abs() <= GRAZING_BAND {
            GammaRegion::Grazing
        } else if nv < 0.0 {
            GammaRegion::Incoming
        } else if nv < eps || v.norm() > 1.0 / eps {
            GammaRegion::NearGrazingOrFast(eps)
        } else {
            GammaRegion::Outgoing
        })
    }

    /// Uniform sample of Ω̄ by rejection from the bounding box.
    pub fn sample_closure<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec3 {
        loop {
            let mut x = Vec3::zeros();
            for i in 0..self.dim {
                x[i] = self.radius * (2.0 * rng.random::<f64>() - 1.0);
            }
            if self.in_closure(&x) && self.xi(&x) <= 0.0 {
                return x;
            }
        }
    }

    /// Boundary point hit by the ray from the origin along a random direction.
    /// Uniform in surface measure for spheres and disks.
    pub fn sample_boundary<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec3 {
        let d = self.random_direction(rng);
        let e = self
            .backward_exit_time(&Vec3::zeros(), &(-d))
            .expect("the origin lies inside every builtin domain");
        e.x_b
    }

    /// Uniform unit vector in the domain's dimension.
    pub fn random_direction<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec3 {
        loop {
            let mut d = Vec3::zeros();
            for i in 0..self.dim {
                d[i] = StandardNormal.sample(rng);
            }
            let n = d.norm();
            if n > 1e-12 {
                return d / n;
            }
        }
    }
}

fn positive(what: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(KinError::ParameterViolation(format!("{what} must be positive, got {v}")))
    }
}

/// Largest root of `a s² − 2 b s + c` with `c ≤ 0`, in a cancellation-free form.
fn quadratic_exit(a: f64, b: f64, c: f64) -> f64 {
    let disc = (b * b - a * c).max(0.0).sqrt();
    if b >= 0.0 {
        (b + disc) / a
    } else if b - disc == 0.0 {
        0.0
    } else {
        c / (b - disc)
    }
}

/// Root of an increasing function on `[lo, hi]` with `f(lo) ≤ 0 < f(hi)`.
/// Newton from the right (monotone for convex f), guarded by bisection.
fn monotone_root<F: Fn(f64) -> f64, D: Fn(f64) -> f64>(f: F, df: D, lo: f64, hi: f64) -> f64 {
    let (mut a, mut b) = (lo, hi);
    let mut s = hi;
    for _ in 0..200 {
        let fs = f(s);
        if fs > 0.0 {
            b = s;
        } else {
            a = s;
        }
        if fs == 0.0 || (b - a) <= 4.0 * f64::EPSILON * b.abs().max(1e-300) {
            return s;
        }
        let d = df(s);
        let mut next = s - fs / d;
        if !(d > 0.0 && next > a && next < b) {
            next = 0.5 * (a + b);
        }
        if next == s {
            return s;
        }
        s = next;
    }
    s
}
