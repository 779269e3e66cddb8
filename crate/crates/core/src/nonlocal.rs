//! Non-local-to-local estimates: velocity integrals of α(X, u)^{−β} near the
//! grazing set, and their time integrals along backward trajectories.
//!
//! The u integral is written in spherical coordinates
//! u = ρ(c n + √(1−c²)(cos φ t₁ + sin φ t₂)) around the outward normal n of
//! the level set through X. Then
//! α(X, u) = ρ² a(c, φ) with a ≈ |∇ξ|²c² + O(|ξ|), so the singular layer sits at
//! c ~ |ξ|^{1/2}. The polar variable is graded by c = |ξ|^{1/2} sinh ψ, which maps
//! the layer to ψ = O(1) and turns a^{−β} dc into a smooth, exponentially
//! decaying density in ψ for every β > 1/2.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KinError, Result};
use crate::geometry::{bracket, Builtin, ConvexDomain, PhaseState};
use crate::kinetic_distance::alpha;
use crate::quadrature::{gauss_legendre, integrate, QuadOptions};
use crate::trajectories::{build_cycle, tangent_basis, BoundaryCondition, Cycle, DEFAULT_BOUNCE_CAP};
use crate::{Mat3, Vec3};

/// Test weight Z(s) along the trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZWeight {
    One,
    /// Z(s) = 1 + amplitude·sin(frequency·s), with |amplitude| < 1.
    Smooth { amplitude: f64, frequency: f64 },
}

impl ZWeight {
    pub fn eval(&self, s: f64) -> f64 {
        match *self {
            Self::One => 1.0,
            Self::Smooth { amplitude, frequency } => 1.0 + amplitude * (frequency * s).sin(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonlocalParams {
    pub beta: f64,
    pub l: f64,
    pub theta: f64,
    pub kappa: f64,
    pub r_moment: f64,
    pub z: ZWeight,
}

impl Default for NonlocalParams {
    fn default() -> Self {
        Self { beta: 1.0, l: 10.0, theta: 0.25, kappa: 1.0, r_moment: 0.0, z: ZWeight::One }
    }
}

impl NonlocalParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(KinError::ParameterViolation(m));
        if !(self.beta > 0.5 && self.beta < 1.5) {
            return bad(format!("beta = {} outside (1/2, 3/2)", self.beta));
        }
        if !(self.l > 0.0 && self.theta > 0.0) {
            return bad("l and theta must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return bad(format!("kappa = {} outside [0, 1]", self.kappa));
        }
        if let ZWeight::Smooth { amplitude, .. } = self.z {
            if amplitude.abs() >= 1.0 {
                return bad("Z must stay positive".into());
            }
        }
        Ok(())
    }
}

/// Extra velocity factor in the u integral.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpeedFactor {
    One,
    /// |v|/|u|.
    SpeedRatio,
}

/// Level-set data at X needed by the u integral.
#[derive(Clone, Copy, Debug)]
struct Frame {
    n: Vec3,
    t1: Vec3,
    t2: Vec3,
    g: Vec3,
    h: Mat3,
    /// ξ(X) < 0.
    xi: f64,
    /// α(X, u) is independent of the azimuth of u about n (balls).
    isotropic: bool,
}

impl Frame {
    fn new(domain: &ConvexDomain, x: &Vec3, xi: f64) -> Result<Self> {
        let g = domain.grad_xi(x);
        let n = domain.outward_normal(x)?;
        let (t1, t2) = tangent_basis(&n, 3);
        let isotropic = matches!(domain.builtin(), Builtin::Sphere { .. });
        Ok(Self { n, t1, t2, g, h: domain.hess_xi(x), xi: xi.min(-XI_FLOOR), isotropic })
    }
}

/// |ξ| floor inside the trajectory integral; keeps α(X, u) representable.
const XI_FLOOR: f64 = 1e-200;

const INNER_OPTS: QuadOptions = QuadOptions { abs_tol: 0.0, rel_tol: 1e-5, max_panels: 400 };
const MIDDLE_OPTS: QuadOptions = QuadOptions { abs_tol: 0.0, rel_tol: 1e-4, max_panels: 400 };
const OUTER_OPTS: QuadOptions = QuadOptions { abs_tol: 0.0, rel_tol: 1e-4, max_panels: 400 };

/// ∫ e^{−θ|v−u|²} |v−u|^{κ−2} W(|u|) α(X, u)^{−β} du with W the moment and
/// speed factors.
fn u_integral_core(frame: &Frame, v: &Vec3, p: &NonlocalParams, factor: SpeedFactor, rho_min: f64) -> Result<f64> {
    let speed = v.norm();
    let eps = (-frame.xi).sqrt();
    let psi_max = (1.0 / eps).asinh();
    let bv = bracket(v);
    let radial = |rho: f64| -> f64 {
        let mut w = rho.powf(2.0 - 2.0 * p.beta);
        if p.r_moment != 0.0 {
            w *= ((1.0 + rho * rho).sqrt() / bv).powf(p.r_moment);
        }
        if factor == SpeedFactor::SpeedRatio {
            w *= speed / rho;
        }
        w
    };
    let (vn, v1, v2) = (v.dot(&frame.n), v.dot(&frame.t1), v.dot(&frame.t2));
    let phi_v = v2.atan2(v1);
    let v_tan = v1.hypot(v2);
    let psi_v = if speed > 0.0 { ((vn / speed) / eps).asinh() } else { 0.0 };
    let kernel = |d2: f64| -> f64 {
        let k = if p.kappa == 1.0 { 1.0 / d2.sqrt() } else { d2.powf(0.5 * p.kappa - 1.0) };
        (-p.theta * d2).exp() * k
    };
    let half_pi = std::f64::consts::FRAC_PI_2;

    let at_rho = |rho: f64| -> Result<f64> {
        if rho == 0.0 {
            return Ok(0.0);
        }
        let wr = radial(rho);
        let middle = |psi: f64| -> f64 {
            let c = eps * psi.sinh();
            let dc = eps * psi.cosh();
            let s = (1.0 - c * c).max(0.0).sqrt();
            let alpha_at = |phi: f64| {
                let (sf, cf) = phi.sin_cos();
                let uh = frame.n * c + (frame.t1 * cf + frame.t2 * sf) * s;
                let ug = uh.dot(&frame.g);
                (ug * ug - 2.0 * uh.dot(&(frame.h * uh)) * frame.xi).powf(-p.beta)
            };
            let a_fixed = if frame.isotropic { alpha_at(0.0) } else { f64::NAN };
            let a_of = |phi: f64| if frame.isotropic { a_fixed } else { alpha_at(phi) };
            // |v − u|² = A − B cos(φ − φ_v), with A ≥ B ≥ 0.
            let big_a = speed * speed + rho * rho - 2.0 * rho * vn * c;
            let big_b = 2.0 * rho * v_tan * s;
            let gap = (big_a - big_b).max(0.0);
            let q = (gap / (big_a + big_b)).sqrt();
            // Near φ = φ_v, tan((φ − φ_v)/2) = q sinh w spreads the peak of
            // the kernel over w = O(1).
            let near = |w: f64| -> f64 {
                let t = q * w.sinh();
                let one_t2 = 1.0 + t * t;
                let dphi = 2.0 * q * w.cosh() / one_t2;
                let d2 = gap * w.cosh().powi(2) / one_t2;
                let phi = 2.0 * t.atan();
                kernel(d2) * dphi * (a_of(phi_v + phi) + a_of(phi_v - phi))
            };
            let far = |phi: f64| -> f64 {
                let d2 = big_a - big_b * phi.cos();
                kernel(d2) * (a_of(phi_v + phi) + a_of(phi_v - phi))
            };
            let w_max = if q > 0.0 { (1.0 / q).asinh() } else { 800.0 };
            let pieces = integrate(near, 0.0, w_max, &[], INNER_OPTS)
                .and_then(|(x, _)| Ok(x + integrate(far, half_pi, std::f64::consts::PI, &[], INNER_OPTS)?.0));
            match pieces {
                Ok(val) => val * dc,
                Err(_) => f64::NAN,
            }
        };
        let breaks = [0.0, psi_v];
        let (val, _) = integrate(middle, -psi_max, psi_max, &breaks, MIDDLE_OPTS)?;
        Ok(val * wr)
    };
    // ρ = y² removes the ρ^{2−2β} endpoint singularity for β up to 5/4.
    let rho_max = speed + (40.0 / p.theta).sqrt();
    let mut failed = None;
    let outer = |y: f64| match at_rho(y * y) {
        Ok(x) => 2.0 * y * x,
        Err(e) => {
            failed.get_or_insert(e);
            f64::NAN
        }
    };
    let res = integrate(outer, rho_min.sqrt(), rho_max.sqrt(), &[speed.sqrt(), (0.5 * speed).sqrt()], OUTER_OPTS);
    if let Some(e) = failed {
        return Err(e);
    }
    let (val, _) = res?;
    Ok(val)
}

/// The u integral and its ratio against 1/(|v|^{2β−1}|ξ(X)|^{β−1/2}).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UIntegral {
    pub value: f64,
    pub ratio: f64,
    pub xi: f64,
}

/// Smallest |ξ(X)| accepted by [`grazing_u_integral`].
pub const U_INTEGRAL_XI_FLOOR: f64 = 1e-10;

/// ∫ e^{−θ|v−u|²} / (|v−u|^{2−κ} α(X, u)^β) du at an interior point X.
pub fn grazing_u_integral(domain: &ConvexDomain, x: &Vec3, v: &Vec3, params: &NonlocalParams) -> Result<UIntegral> {
    params.validate()?;
    let xi = domain.xi(x);
    if xi >= 0.0 {
        return Err(KinError::OutsideDomain(xi));
    }
    if -xi < U_INTEGRAL_XI_FLOOR {
        return Err(KinError::ParameterViolation(format!("|xi(X)| = {} below {U_INTEGRAL_XI_FLOOR}", -xi)));
    }
    let frame = Frame::new(domain, x, xi)?;
    let value = u_integral_core(&frame, v, params, SpeedFactor::One, 0.0)?;
    let ratio = value * v.norm().powf(2.0 * params.beta - 1.0) * (-xi).powf(params.beta - 0.5);
    Ok(UIntegral { value, ratio, xi })
}

/// Point at level ξ = `xi` of a ball of radius `r` along a fixed generic
/// direction, used by the |ξ| scans.
pub fn sphere_point_at_level(r: f64, xi: f64) -> Vec3 {
    Vec3::new(0.48, 0.6, 0.64) * (r * r + xi).sqrt()
}

/// Velocity used by the |ξ| scans.
pub fn scan_velocity(speed: f64) -> Vec3 {
    Vec3::new(0.8, -0.36, -0.48) * speed
}

/// Log–log slope of the u integral against |ξ(X)| on a ball.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UScan {
    pub beta: f64,
    pub xis: Vec<f64>,
    pub values: Vec<f64>,
    pub ratios: Vec<f64>,
    pub slope: f64,
    pub spread: f64,
}

pub fn u_integral_scan(domain: &ConvexDomain, xis: &[f64], speed: f64, params: &NonlocalParams) -> Result<UScan> {
    let r = match domain.builtin() {
        Builtin::Sphere { r } => r,
        _ => return Err(KinError::ParameterViolation("u-integral scans run on a sphere".into())),
    };
    let v = scan_velocity(speed);
    let res: Vec<UIntegral> = xis
        .par_iter()
        .map(|&a| grazing_u_integral(domain, &sphere_point_at_level(r, -a), &v, params))
        .collect::<Result<_>>()?;
    let values: Vec<f64> = res.iter().map(|u| u.value).collect();
    let ratios: Vec<f64> = res.iter().map(|u| u.ratio).collect();
    let fit = crate::fit::line_fit(
        &xis.iter().map(|x| x.ln()).collect::<Vec<_>>(),
        &values.iter().map(|x| x.ln()).collect::<Vec<_>>(),
    )
    .ok_or_else(|| KinError::ParameterViolation("u-integral scan needs two or more points".into()))?;
    Ok(UScan { beta: params.beta, xis: xis.to_vec(), values, ratios: ratios.clone(), slope: fit.slope, spread: spread(&ratios) })
}

/// max/min of a positive sample.
pub fn spread(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    max / min
}

/// Left side, right-side scale and their ratio for one state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicalIntegral {
    pub alpha: f64,
    pub lhs: f64,
    pub rhs_scale: f64,
    pub ratio: f64,
    pub segments: usize,
}

/// Kinetic distance below which a state is treated as grazing and skipped.
pub const DYNAMICAL_ALPHA_FLOOR: f64 = 1e-12;

/// Nodes of the graded per-segment rule.
/// Even, so that the rule is symmetric about the segment midpoint.
const SEGMENT_NODES: usize = 20;
/// Grading power: node density ∝ y^{m−1} at both segment ends, which absorbs
/// the |s − tℓ|^{−(β−1/2)} end singularity for every β < 3/2 − 1/m.
const GRADING: i32 = 4;

/// Node of the graded rule: distances to both ends (as fractions of the
/// segment, each accurate to full relative precision) and the weight.
#[derive(Clone, Copy, Debug)]
struct Node {
    from_lo: f64,
    from_hi: f64,
    w: f64,
}

/// Graded rule on [0, 1]: w(y) = y^m / (y^m + (1−y)^m).
fn graded_rule() -> Vec<Node> {
    let (x, w) = gauss_legendre(SEGMENT_NODES);
    let m = GRADING as f64;
    x.iter()
        .zip(&w)
        .map(|(&xi, &wi)| {
            let y = 0.5 * (xi + 1.0);
            let (a, b) = (y.powi(GRADING), (1.0 - y).powi(GRADING));
            let dw = m * y.powi(GRADING - 1) * (1.0 - y).powi(GRADING - 1) / ((a + b) * (a + b));
            Node { from_lo: a / (a + b), from_hi: b / (a + b), w: 0.5 * wi * dw }
        })
        .collect()
}

/// Time-integral data of one cycle segment [lo, hi] ⊂ [t_{ℓ+1}, t_ℓ].
struct Segment {
    lo: f64,
    hi: f64,
    /// Later endpoint (t_ℓ, x_ℓ, ξ(x_ℓ)) and earlier recorded bounce, if any.
    later: (f64, Vec3, f64),
    earlier: Option<(f64, Vec3)>,
    v: Vec3,
    full: bool,
}

fn segments(cycle: &Cycle, domain: &ConvexDomain) -> Vec<Segment> {
    let e = &cycle.entries;
    let mut out = Vec::with_capacity(e.len());
    for ell in 0..e.len() {
        let hi = e[ell].t;
        let (lo, earlier) = match e.get(ell + 1) {
            Some(n) => (n.t, Some((n.t, n.x))),
            None => (cycle.s_min, None),
        };
        if hi <= lo {
            continue;
        }
        let xi_later = if ell == 0 { domain.xi(&e[0].x) } else { 0.0 };
        out.push(Segment { lo, hi, later: (hi, e[ell].x, xi_later), earlier, v: e[ell].v, full: ell >= 1 && earlier.is_some() });
    }
    out
}

/// X and ξ(X) at a rule node of a segment, computed from the nearer endpoint
/// so that ξ keeps full relative accuracy next to bounce points.
fn position_and_level(domain: &ConvexDomain, seg: &Segment, node: &Node) -> (Vec3, f64) {
    let len = seg.hi - seg.lo;
    let (t_l, x_l, xi_l) = seg.later;
    let (base, xi_b, w) = match seg.earlier {
        Some((t_e, x_e)) if node.from_lo < node.from_hi => (x_e, 0.0, seg.v * (seg.lo - t_e + len * node.from_lo)),
        _ => (x_l, xi_l, -seg.v * (t_l - seg.hi + len * node.from_hi)),
    };
    let x = base + w;
    let xi = if domain.is_quadratic() {
        xi_b + domain.grad_xi(&base).dot(&w) + 0.5 * w.dot(&(domain.hess_xi(&base) * w))
    } else {
        domain.xi(&x)
    };
    (x, xi)
}

/// True when every full segment of the cycle is congruent to every other one
/// under a symmetry that leaves the u integral invariant.
fn congruent_segments(domain: &ConvexDomain, bc: BoundaryCondition) -> bool {
    bc == BoundaryCondition::BounceBack
        || (bc == BoundaryCondition::Specular && matches!(domain.builtin(), Builtin::Sphere { .. }))
}

/// Left side of the trajectory estimate for one state with an explicit
/// speed factor. The time integral is split at every bounce and each piece
/// uses a rule graded towards both ends.
pub fn nonlocal_integral(
    domain: &ConvexDomain,
    bc: BoundaryCondition,
    state: &PhaseState,
    params: &NonlocalParams,
    factor: SpeedFactor,
) -> Result<DynamicalIntegral> {
    params.validate()?;
    if !bc.is_deterministic() {
        return Err(KinError::ParameterViolation("trajectory estimates need a deterministic bc".into()));
    }
    if state.t <= 0.0 {
        return Err(KinError::ParameterViolation("t must be positive".into()));
    }
    let a0 = alpha(domain, &state.x, &state.v)?;
    if a0 < DYNAMICAL_ALPHA_FLOOR {
        return Err(KinError::GrazingDegenerate(a0));
    }
    let cycle = build_cycle(domain, bc, state, 0.0, DEFAULT_BOUNCE_CAP)?;
    let segs = segments(&cycle, domain);
    let rule = graded_rule();
    let bv = state.bracket_v();
    let weight = |s: f64| (-params.l * bv * (state.t - s)).exp() * params.z.eval(s);
    let j_at = |seg: &Segment, node: &Node| -> Result<f64> {
        let (x, xi) = position_and_level(domain, seg, node);
        
        u_integral_core(&Frame::new(domain, &x, xi)?, &seg.v, params, factor, 0.0)
    };
    let eval_segment = |seg: &Segment| -> Result<Vec<f64>> { rule.par_iter().map(|n| j_at(seg, n)).collect() };
    // A full sphere chord is mirror-symmetric about its midpoint, and the u
    // integral is even in V, so the profile is symmetric too.
    let eval_symmetric = |seg: &Segment| -> Result<Vec<f64>> {
        let half: Vec<f64> = rule[..rule.len() / 2].par_iter().map(|n| j_at(seg, n)).collect::<Result<_>>()?;
        Ok(half.iter().chain(half.iter().rev()).cloned().collect())
    };
    let congruent = congruent_segments(domain, bc);
    let sphere = matches!(domain.builtin(), Builtin::Sphere { .. });
    let mut cached: Option<Vec<f64>> = None;
    let mut lhs = 0.0;
    for seg in &segs {
        let js = if seg.full && congruent {
            if cached.is_none() {
                cached = Some(if sphere { eval_symmetric(seg)? } else { eval_segment(seg)? });
            }
            cached.clone().expect("cache filled above")
        } else {
            eval_segment(seg)?
        };
        let len = seg.hi - seg.lo;
        lhs += rule
            .iter()
            .zip(&js)
            .map(|(n, j)| n.w * len * weight(seg.hi - len * n.from_hi) * j)
            .sum::<f64>();
    }
    let sup = z_sup(params, bv, state.t);
    let rhs_scale = sup / (bv * a0.powf(params.beta - 0.5));
    Ok(DynamicalIntegral { alpha: a0, lhs, rhs_scale, ratio: lhs / rhs_scale, segments: segs.len() })
}

/// sup over s ∈ [0, t] of e^{−(l/2)⟨v⟩(t−s)} Z(s), on a fine grid.
fn z_sup(params: &NonlocalParams, bv: f64, t: f64) -> f64 {
    if params.z == ZWeight::One {
        return 1.0;
    }
    (0..=4096)
        .map(|k| {
            let s = t * k as f64 / 4096.0;
            (-0.5 * params.l * bv * (t - s)).exp() * params.z.eval(s)
        })
        .fold(0.0, f64::max)
}

/// Trajectory estimate with the kernel e^{−θ|V_cl−u|²}|V_cl−u|^{κ−2}.
pub fn dynamical_nonlocal_integral(
    domain: &ConvexDomain,
    bc: BoundaryCondition,
    state: &PhaseState,
    params: &NonlocalParams,
) -> Result<DynamicalIntegral> {
    nonlocal_integral(domain, bc, state, params, SpeedFactor::One)
}

/// Trajectory estimate with the extra factor |v|/|u|, for 1/2 < β < 1.
pub fn nonlocal_u_variant(
    domain: &ConvexDomain,
    bc: BoundaryCondition,
    state: &PhaseState,
    params: &NonlocalParams,
) -> Result<DynamicalIntegral> {
    if params.beta >= 1.0 {
        return Err(KinError::ParameterViolation(format!("beta = {} must be below 1", params.beta)));
    }
    nonlocal_integral(domain, bc, state, params, SpeedFactor::SpeedRatio)
}

/// One α-scan of the trajectory estimate on a ball.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicalScan {
    pub beta: f64,
    pub l: f64,
    pub rows: Vec<DynamicalIntegral>,
    /// Fitted exponent of lhs against α.
    pub slope: f64,
    pub spread: f64,
}

/// Configuration of the grazing family used by trajectory scans.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicalScanConfig {
    pub alphas: Vec<f64>,
    pub speed: f64,
    pub t: f64,
    pub phase: f64,
}

impl Default for DynamicalScanConfig {
    fn default() -> Self {
        Self { alphas: crate::fit::log_space(1e-6, 1e-2, 9), speed: 1.0, t: 1.0, phase: 0.25 }
    }
}

/// State of the trajectory scan: x sits at fraction `phase` of its own chord,
/// so |ξ(x)|/α is the same for every member of the family.
pub fn scan_state(domain: &ConvexDomain, alpha: f64, cfg: &DynamicalScanConfig) -> Result<PhaseState> {
    let st = crate::jacobians::grazing_family_state(domain, alpha, cfg.speed, 0.0, cfg.phase)?;
    Ok(PhaseState::new(cfg.t, st.x, st.v))
}

pub fn dynamical_scan(
    domain: &ConvexDomain,
    bc: BoundaryCondition,
    params: &NonlocalParams,
    cfg: &DynamicalScanConfig,
    factor: SpeedFactor,
) -> Result<DynamicalScan> {
    let rows: Vec<DynamicalIntegral> = cfg
        .alphas
        .iter()
        .map(|&a| {
            nonlocal_integral(domain, bc, &scan_state(domain, a, cfg)?, params, factor)
        })
        .collect::<Result<_>>()?;
    let fit = crate::fit::line_fit(
        &rows.iter().map(|r| r.alpha.ln()).collect::<Vec<_>>(),
        &rows.iter().map(|r| r.lhs.ln()).collect::<Vec<_>>(),
    )
    .ok_or_else(|| KinError::ParameterViolation("scan needs two or more points".into()))?;
    let ratios: Vec<f64> = rows.iter().map(|r| r.ratio).collect();
    Ok(DynamicalScan { beta: params.beta, l: params.l, slope: fit.slope, spread: spread(&ratios), rows })
}

/// Outcome of the l calibration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LCalibration {
    pub l: f64,
    /// (l, spread of the ratio over the scan) at every step.
    pub history: Vec<(f64, f64)>,
}

/// Start at l = 10⟨v⟩ and double until the spread of the ratio over the scan
/// changes by less than 5% between consecutive values.
pub fn calibrate_l(
    domain: &ConvexDomain,
    bc: BoundaryCondition,
    params: &NonlocalParams,
    cfg: &DynamicalScanConfig,
    max_doublings: usize,
) -> Result<LCalibration> {
    let mut p = *params;
    p.l = 10.0 * (1.0 + cfg.speed * cfg.speed).sqrt();
    let mut history = vec![];
    for _ in 0..=max_doublings {
        let scan = dynamical_scan(domain, bc, &p, cfg, SpeedFactor::One)?;
        history.push((p.l, scan.spread));
        if let [.., (_, a), (_, b)] = history[..] {
            if (b / a - 1.0).abs() < 0.05 {
                return Ok(LCalibration { l: history[history.len() - 2].0, history });
            }
        }
        p.l *= 2.0;
    }
    Ok(LCalibration { l: p.l / 2.0, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sphere() -> ConvexDomain {
        ConvexDomain::sphere(1.0).unwrap()
    }

    fn params(beta: f64) -> NonlocalParams {
        NonlocalParams { beta, ..NonlocalParams::default() }
    }

    #[test]
    fn graded_rule_integrates_end_singularity() {
        // ∫₀¹ (y(1−y))^{−3/4} dy = B(1/4, 1/4).
        let exact = 7.416_298_709_205_487;
        let got: f64 = graded_rule().iter().map(|n| n.w * (n.from_lo * n.from_hi).powf(-0.75)).sum();
        assert_relative_eq!(got, exact, max_relative = 1e-6);
    }

    #[test]
    fn u_integral_slope_follows_xi_power() {
        let xis = crate::fit::log_space(1e-6, 1e-1, 6);
        for beta in [0.75, 1.0, 1.25] {
            let scan = u_integral_scan(&sphere(), &xis, 1.0, &params(beta)).unwrap();
            assert!((scan.slope + (beta - 0.5)).abs() <= 0.05, "beta {beta}: {scan:?}");
            assert!(scan.spread <= 20.0, "beta {beta}: {scan:?}");
        }
    }

    #[test]
    fn u_integral_decreases_in_theta() {
        let x = sphere_point_at_level(1.0, -1e-3);
        let v = scan_velocity(1.0);
        let mut prev = f64::INFINITY;
        for theta in [1.0, 2.0, 5.0, 10.0, 20.0] {
            let p = NonlocalParams { theta, ..params(1.0) };
            let i = grazing_u_integral(&sphere(), &x, &v, &p).unwrap().value;
            assert!(i < prev);
            prev = i;
        }
    }

    #[test]
    fn u_integral_rejects_boundary_and_outside_points() {
        let v = scan_velocity(1.0);
        let p = params(1.0);
        assert!(grazing_u_integral(&sphere(), &Vec3::new(2.0, 0.0, 0.0), &v, &p).is_err());
        assert!(grazing_u_integral(&sphere(), &sphere_point_at_level(1.0, -1e-12), &v, &p).is_err());
        assert!(grazing_u_integral(&sphere(), &Vec3::zeros(), &v, &params(1.6)).is_err());
    }

    #[test]
    fn speed_factor_is_linear_in_small_speeds() {
        // With u kept away from the origin, |v|/|u| makes the integral O(|v|).
        let frame = Frame::new(&sphere(), &sphere_point_at_level(1.0, -1e-2), -1e-2).unwrap();
        let p = params(0.75);
        let q: Vec<f64> = [1e-3, 1e-4]
            .iter()
            .map(|&s| u_integral_core(&frame, &scan_velocity(s), &p, SpeedFactor::SpeedRatio, 0.5).unwrap() / s)
            .collect();
        assert_relative_eq!(q[0], q[1], max_relative = 1e-3);
    }

    #[test]
    fn doubling_l_never_increases_lhs() {
        let st = crate::jacobians::grazing_family_state(&sphere(), 1e-2, 1.0, 1.0, 0.25).unwrap();
        let mut prev = f64::INFINITY;
        for l in [5.0, 10.0, 20.0, 40.0] {
            let p = NonlocalParams { l, ..params(1.0) };
            let d = dynamical_nonlocal_integral(&sphere(), BoundaryCondition::Specular, &st, &p).unwrap();
            assert!(d.lhs <= prev);
            prev = d.lhs;
        }
    }

    #[test]
    fn clamped_speed_factor_matches_plain_integral() {
        let st = crate::jacobians::grazing_family_state(&sphere(), 1e-2, 1.0, 1.0, 0.25).unwrap();
        let p = params(0.75);
        let a = dynamical_nonlocal_integral(&sphere(), BoundaryCondition::Specular, &st, &p).unwrap();
        let b = nonlocal_integral(&sphere(), BoundaryCondition::Specular, &st, &p, SpeedFactor::One).unwrap();
        assert_eq!(a, b);
        assert!(nonlocal_u_variant(&sphere(), BoundaryCondition::Specular, &st, &params(1.0)).is_err());
    }

    #[test]
    fn congruent_segments_share_the_profile() {
        let st = crate::jacobians::grazing_family_state(&sphere(), 1e-2, 1.0, 1.0, 0.25).unwrap();
        let cycle = build_cycle(&sphere(), BoundaryCondition::Specular, &st, 0.0, 1000).unwrap();
        let segs = segments(&cycle, &sphere());
        let p = params(1.0);
        let (a, b) = (&segs[1], &segs[4]);
        assert!(a.full && b.full);
        for node in graded_rule().iter().step_by(5) {
            let j = |g: &Segment| {
                let (x, xi) = position_and_level(&sphere(), g, node);
                u_integral_core(&Frame::new(&sphere(), &x, xi).unwrap(), &g.v, &p, SpeedFactor::One, 0.0).unwrap()
            };
            assert_relative_eq!(j(a), j(b), max_relative = 1e-5);
        }
    }

    #[test]
    fn sphere_chord_profile_is_symmetric() {
        let st = crate::jacobians::grazing_family_state(&sphere(), 1e-2, 1.0, 1.0, 0.25).unwrap();
        let cycle = build_cycle(&sphere(), BoundaryCondition::Specular, &st, 0.0, 1000).unwrap();
        let segs = segments(&cycle, &sphere());
        let rule = graded_rule();
        let p = params(1.25);
        let j = |n: &Node| {
            let (x, xi) = position_and_level(&sphere(), &segs[2], n);
            u_integral_core(&Frame::new(&sphere(), &x, xi).unwrap(), &segs[2].v, &p, SpeedFactor::One, 0.0).unwrap()
        };
        for k in [0, 3, 7] {
            let (a, b) = (&rule[k], &rule[rule.len() - 1 - k]);
            assert_relative_eq!(a.from_lo, b.from_hi, max_relative = 1e-12);
            assert_relative_eq!(j(a), j(b), max_relative = 1e-5);
        }
    }

    #[test]
    fn splitting_at_bounces_matches_unsplit_integral() {
        let d = sphere();
        let st = crate::jacobians::grazing_family_state(&d, 0.2, 1.0, 0.6, 0.25).unwrap();
        let p = params(0.75);
        let split = dynamical_nonlocal_integral(&d, BoundaryCondition::Specular, &st, &p).unwrap();
        assert!(split.segments >= 2);
        let cycle = build_cycle(&d, BoundaryCondition::Specular, &st, 0.0, 1000).unwrap();
        let segs = segments(&cycle, &d);
        let bv = st.bracket_v();
        let f = |s: f64| {
            let seg = segs.iter().find(|g| s >= g.lo && s <= g.hi).unwrap();
            let len = seg.hi - seg.lo;
            let node = Node { from_lo: (s - seg.lo) / len, from_hi: (seg.hi - s) / len, w: 0.0 };
            let (x, xi) = position_and_level(&d, seg, &node);
            let j = u_integral_core(&Frame::new(&d, &x, xi).unwrap(), &seg.v, &p, SpeedFactor::One, 0.0).unwrap();
            (-p.l * bv * (st.t - s)).exp() * j
        };
        let opts = QuadOptions { abs_tol: 0.0, rel_tol: 1e-4, max_panels: 400 };
        let (unsplit, _) = integrate(f, 0.0, st.t, &[], opts).unwrap();
        assert_relative_eq!(split.lhs, unsplit, max_relative = 1e-3);
    }

    #[test]
    fn smooth_z_weight_is_accepted() {
        let st = crate::jacobians::grazing_family_state(&sphere(), 1e-2, 1.0, 1.0, 0.25).unwrap();
        let p = NonlocalParams { z: ZWeight::Smooth { amplitude: 0.5, frequency: 3.0 }, ..params(1.0) };
        let d = dynamical_nonlocal_integral(&sphere(), BoundaryCondition::Specular, &st, &p).unwrap();
        assert!(d.lhs.is_finite() && d.rhs_scale > 0.0);
        let bad = NonlocalParams { z: ZWeight::Smooth { amplitude: 1.5, frequency: 3.0 }, ..params(1.0) };
        assert!(dynamical_nonlocal_integral(&sphere(), BoundaryCondition::Specular, &st, &bad).is_err());
    }
}
