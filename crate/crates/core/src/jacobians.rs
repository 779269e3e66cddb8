//! Derivatives of exit data and cycles, finite-difference trajectory
//! Jacobians and the grazing scaling scans.

use nalgebra::SMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KinError, Result};
use crate::fit::{scaling_fit, ScalingFit};
use crate::geometry::{Builtin, ConvexDomain, PhaseState};
use crate::kinetic_distance::alpha;
use crate::trajectories::disk::{DiskCycle, D4};
use crate::trajectories::{build_cycle, BoundaryCondition, Cycle, BOUNCE_TIME_GUARD, DEFAULT_BOUNCE_CAP};
use crate::{Mat3, Vec3};

/// Incidence |v·n|/|v| below which exit derivatives are refused.
pub const GRAZING_EXIT_RATIO: f64 = 1e-10;

/// Derivatives of the backward exit time and footpoint.
///
/// Matrix entries are `(i, j) = ∂(x_b)_i / ∂(·)_j`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExitDerivatives {
    pub t_b: f64,
    pub x_b: Vec3,
    pub dx_tb: Vec3,
    pub dv_tb: Vec3,
    pub dx_xb: Mat3,
    pub dv_xb: Mat3,
}

/// ∇ₓt_b = n/(v·n), ∇ᵥt_b = −t_b n/(v·n), ∇ₓx_b = I − v⊗∇ₓt_b,
/// ∇ᵥx_b = −t_b I − v⊗∇ᵥt_b, with n = n(x_b).
pub fn d_exit(domain: &ConvexDomain, x: &Vec3, v: &Vec3) -> Result<ExitDerivatives> {
    let v = domain.planar(v);
    let e = domain.backward_exit_time(x, &v)?;
    let n = e.normal_at_exit;
    let vn = v.dot(&n);
    if vn.abs() <= GRAZING_EXIT_RATIO * v.norm() {
        return Err(KinError::GrazingExit);
    }
    let dx_tb = n / vn;
    let dv_tb = -e.t_b * n / vn;
    let id = identity(domain);
    Ok(ExitDerivatives {
        t_b: e.t_b,
        x_b: e.x_b,
        dx_tb,
        dv_tb,
        dx_xb: id - v * dx_tb.transpose(),
        dv_xb: -e.t_b * id - v * dv_tb.transpose(),
    })
}

fn identity(domain: &ConvexDomain) -> Mat3 {
    if domain.dim() == 2 {
        Mat3::from_diagonal(&Vec3::new(1.0, 1.0, 0.0))
    } else {
        Mat3::identity()
    }
}

/// Derivatives of the ℓ-th bounce-back entry (tℓ, xℓ, vℓ) with respect to
/// the initial (x, v); `dt_t = ∂tℓ/∂t = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BounceBackDerivatives {
    pub ell: usize,
    pub t: f64,
    pub x: Vec3,
    pub v: Vec3,
    pub dx_t: Vec3,
    pub dv_t: Vec3,
    pub dx_x: Mat3,
    pub dv_x: Mat3,
    pub dx_v: Mat3,
    pub dv_v: Mat3,
    /// ∂ₓ(tℓ − tℓ⁺¹) and ∂ᵥ(tℓ − tℓ⁺¹) for ℓ ≥ 1 (zero for ℓ = 0).
    pub dx_gap: Vec3,
    pub dv_gap: Vec3,
}

/// Closed-form bounce-back derivatives.
///
/// With x¹ = x − t_b v, τ = t_b(x¹, −v), x² = x¹ + τ v, nᵢ = n(xⁱ):
/// tℓ = t¹ − (ℓ−1)τ, ∂ₓτ = n₁/(v·n₁) − n₂/(v·n₂),
/// ∂ᵥτ = (t_b − τ) n₂/(v·n₂) − t_b n₁/(v·n₁).
pub fn bounce_back_cycle_derivatives(
    domain: &ConvexDomain,
    state: &PhaseState,
    ell: usize,
) -> Result<BounceBackDerivatives> {
    let v = domain.planar(&state.v);
    let id = identity(domain);
    let sign = if ell % 2 == 1 { -1.0 } else { 1.0 };
    if ell == 0 {
        return Ok(BounceBackDerivatives {
            ell,
            t: state.t,
            x: state.x,
            v,
            dx_t: Vec3::zeros(),
            dv_t: Vec3::zeros(),
            dx_x: id,
            dv_x: Mat3::zeros(),
            dx_v: Mat3::zeros(),
            dv_v: id,
            dx_gap: Vec3::zeros(),
            dv_gap: Vec3::zeros(),
        });
    }
    let e1 = d_exit(domain, &state.x, &v)?;
    let x1 = e1.x_b;
    let e2 = domain.backward_exit_time(&x1, &(-v))?;
    let tau = e2.t_b;
    let x2 = e2.x_b;
    let n1 = domain.outward_normal(&x1)?;
    let n2 = domain.outward_normal(&x2)?;
    let (vn1, vn2) = (v.dot(&n1), v.dot(&n2));
    if vn2.abs() <= GRAZING_EXIT_RATIO * v.norm() {
        return Err(KinError::GrazingExit);
    }
    let tb = e1.t_b;
    let dx_tau = n1 / vn1 - n2 / vn2;
    let dv_tau = (tb - tau) * n2 / vn2 - tb * n1 / vn1;
    let l = (ell - 1) as f64;
    let dx_t = -e1.dx_tb - l * dx_tau;
    let dv_t = -e1.dv_tb - l * dv_tau;
    let (x, dx_x, dv_x) = if ell % 2 == 1 {
        (x1, e1.dx_xb, e1.dv_xb)
    } else {
        (
            x2,
            e1.dx_xb + v * dx_tau.transpose(),
            e1.dv_xb + tau * id + v * dv_tau.transpose(),
        )
    };
    Ok(BounceBackDerivatives {
        ell,
        t: state.t - tb - l * tau,
        x,
        v: sign * v,
        dx_t,
        dv_t,
        dx_x,
        dv_x,
        dx_v: Mat3::zeros(),
        dv_v: sign * id,
        dx_gap: dx_tau,
        dv_gap: dv_tau,
    })
}

/// Finite-difference step policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum FdStep {
    /// Same step in every direction.
    Fixed(f64),
    /// Steps scaled to the grazing geometry of the state:
    /// h_t = rel·c, h_x = rel·c·α/|v|, h_v = rel·α/|v|, with α/|v|²
    /// capped at diameter² and
    /// c = min(√α/|v|², diameter/|v|) the segment time scale.
    Auto { rel: f64 },
}

impl Default for FdStep {
    fn default() -> Self {
        FdStep::Auto { rel: 1e-3 }
    }
}

impl FdStep {
    /// Steps for (t, x, v) at a state with kinetic distance `alpha`.
    pub fn steps(&self, domain: &ConvexDomain, alpha: f64, v: &Vec3) -> [f64; 3] {
        match *self {
            FdStep::Fixed(h) => [h, h, h],
            FdStep::Auto { rel } => {
                let sp = v.norm();
                let diam = domain.diameter();
                let c = (alpha.sqrt() / (sp * sp)).min(diam / sp);
                let ga = (alpha / (sp * sp)).min(diam * diam);
                [rel * c, rel * c * sp * ga, rel * sp * ga]
            }
        }
    }
}

/// Number of times the stencil is shrunk before giving up.
pub const MAX_STEP_SHRINKS: usize = 4;
/// Shrink factor per retry.
pub const STEP_SHRINK: f64 = 0.1;

/// ∂(X_cl, V_cl)(s)/∂(t, x, v) by central differences.
///
/// Rows are (X₁, X₂, X₃, V₁, V₂, V₃); columns are (t, x₁, x₂, x₃, v₁, v₂, v₃).
/// For planar domains the third spatial row and column are zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryJacobian {
    pub matrix: SMatrix<f64, 6, 7>,
    /// Step used for each column.
    pub h: [f64; 7],
    /// Segment index ℓ_* of the base trajectory at s.
    pub ell: usize,
    /// Distance from s to the nearest bounce time over the base and all
    /// perturbed trajectories.
    pub min_bounce_distance: f64,
}

impl TrajectoryJacobian {
    fn block(&self, r: usize, c: usize) -> Mat3 {
        self.matrix.fixed_view::<3, 3>(r, c).into_owned()
    }
    pub fn dx_x(&self) -> Mat3 {
        self.block(0, 1)
    }
    pub fn dv_x(&self) -> Mat3 {
        self.block(0, 4)
    }
    pub fn dx_v(&self) -> Mat3 {
        self.block(3, 1)
    }
    pub fn dv_v(&self) -> Mat3 {
        self.block(3, 4)
    }
    pub fn dt(&self) -> [f64; 6] {
        let mut o = [0.0; 6];
        for (i, x) in o.iter_mut().enumerate() {
            *x = self.matrix[(i, 0)];
        }
        o
    }
    /// Largest step actually used.
    pub fn h_used(&self) -> f64 {
        self.h.iter().cloned().fold(0.0, f64::max)
    }
}

/// Max-abs entry of a block.
pub fn sup_norm(m: &Mat3) -> f64 {
    m.iter().fold(0.0, |a, b| a.max(b.abs()))
}

fn eval_at(domain: &ConvexDomain, bc: BoundaryCondition, st: &PhaseState, s: f64) -> Result<(Vec3, Vec3, usize, f64)> {
    if domain.xi(&st.x) > 0.0 {
        return Err(KinError::SegmentCrossing);
    }
    let c = build_cycle(domain, bc, st, s, DEFAULT_BOUNCE_CAP)?;
    let d = c.bounce_time_distance(s);
    if d < BOUNCE_TIME_GUARD {
        return Err(KinError::SegmentCrossing);
    }
    let (x, v) = c.eval(s)?;
    Ok((x, v, c.segment_index(s), d))
}

/// Central-difference trajectory Jacobian at time `s`.
pub fn fd_trajectory_jacobian(
    domain: &ConvexDomain,
    bc: BoundaryCondition,
    state: &PhaseState,
    s: f64,
    step: FdStep,
) -> Result<TrajectoryJacobian> {
    if !bc.is_deterministic() {
        return Err(KinError::ParameterViolation(
            "trajectory Jacobians are undefined for diffuse reflection".into(),
        ));
    }
    let v = domain.planar(&state.v);
    let state = PhaseState::new(state.t, state.x, v);
    let a = alpha(domain, &state.x, &v)?;
    let base = eval_at(domain, bc, &state, s)?;
    let [ht, hx, hv] = step.steps(domain, a, &v);
    let dim = domain.dim();
    let mut jac = TrajectoryJacobian {
        matrix: SMatrix::zeros(),
        h: [0.0; 7],
        ell: base.2,
        min_bounce_distance: base.3,
    };
    let mut cols: Vec<usize> = vec![0];
    cols.extend(1..=dim);
    cols.extend(4..4 + dim);
    for col in cols {
        let mut h = match col {
            0 => ht,
            1..=3 => hx,
            _ => hv,
        };
        let mut done = false;
        for _ in 0..=MAX_STEP_SHRINKS {
            let shift = |sign: f64| {
                let mut p = state;
                match col {
                    0 => p.t += sign * h,
                    1..=3 => p.x[col - 1] += sign * h,
                    _ => p.v[col - 4] += sign * h,
                }
                p
            };
            let plus = eval_at(domain, bc, &shift(1.0), s);
            let minus = eval_at(domain, bc, &shift(-1.0), s);
            match (plus, minus) {
                (Ok(p), Ok(m)) if p.2 == base.2 && m.2 == base.2 => {
                    for i in 0..3 {
                        jac.matrix[(i, col)] = (p.0[i] - m.0[i]) / (2.0 * h);
                        jac.matrix[(i + 3, col)] = (p.1[i] - m.1[i]) / (2.0 * h);
                    }
                    jac.h[col] = h;
                    jac.min_bounce_distance = jac.min_bounce_distance.min(p.3).min(m.3);
                    done = true;
                    break;
                }
                (Err(e), _) | (_, Err(e)) if !matches!(e, KinError::SegmentCrossing) => return Err(e),
                _ => h *= STEP_SHRINK,
            }
        }
        if !done {
            return Err(KinError::SegmentCrossing);
        }
    }
    Ok(jac)
}

/// One point of a grazing Jacobian scan.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianScanRow {
    pub alpha: f64,
    pub sup_dx_x: f64,
    pub sup_dv_x: f64,
    pub sup_dx_v: f64,
    pub sup_dv_v: f64,
    pub h_used: f64,
}

/// Scan parameters for [`scaling_exponents`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianScanConfig {
    pub alphas: Vec<f64>,
    pub speed: f64,
    pub t_minus_s: f64,
    /// Position of s inside its segment, as a fraction measured from the
    /// older end; 0.5 is the chord midpoint where ∂ₓX degenerates.
    pub phase: f64,
    pub step: FdStep,
}

impl Default for JacobianScanConfig {
    fn default() -> Self {
        Self {
            alphas: crate::fit::log_space(1e-6, 1e-1, 11),
            speed: 1.0,
            t_minus_s: 3.0,
            phase: 0.25,
            step: FdStep::default(),
        }
    }
}

/// Fitted exponents of the four Jacobian blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianScan {
    pub rows: Vec<JacobianScanRow>,
    pub skipped: usize,
    pub dx_x: Option<ScalingFit>,
    pub dv_x: Option<ScalingFit>,
    pub dx_v: Option<ScalingFit>,
    pub dv_v: Option<ScalingFit>,
}

impl JacobianScan {
    /// The observed growth never exceeds the bound rates
    /// α^{-1/2}, α^0, α^{-1}, α^{-1/2} by more than `tol`.
    pub fn within_bounds(&self, tol: f64) -> bool {
        let ok = |f: &Option<ScalingFit>, p: f64| f.map(|f| f.exponent >= p - tol).unwrap_or(false);
        ok(&self.dx_x, -0.5) && ok(&self.dv_x, 0.0) && ok(&self.dx_v, -1.0) && ok(&self.dv_v, -0.5)
    }
}

/// A near-grazing state in a ball or disk of radius R with kinetic distance
/// `alpha`, speed `speed`, chosen so that time `t − t_minus_s` sits at
/// fraction `phase` of its segment. Returns the state with t = t_minus_s.
pub fn grazing_family_state(
    domain: &ConvexDomain,
    alpha: f64,
    speed: f64,
    t_minus_s: f64,
    phase: f64,
) -> Result<PhaseState> {
    let r = match domain.builtin() {
        Builtin::Sphere { r } | Builtin::Disk2D { r } => r,
        _ => {
            return Err(KinError::ParameterViolation(
                "grazing families are defined for spheres and disks".into(),
            ))
        }
    };
    // α = 4|v|²(R² − d²) for a chord at distance d from the centre.
    let half = (alpha / (4.0 * speed * speed)).sqrt();
    if half >= r {
        return Err(KinError::ParameterViolation(format!("alpha {alpha} too large for the domain")));
    }
    let d = (r * r - half * half).sqrt();
    let chord = 2.0 * half / speed;
    let f0 = (t_minus_s / chord - (1.0 - phase)).rem_euclid(1.0);
    let f0 = f0.clamp(1e-6, 1.0 - 1e-6);
    // A fixed generic rotation keeps the scan off the coordinate axes.
    let (e1, e2) = if domain.dim() == 2 {
        let a = 0.4f64;
        (Vec3::new(a.cos(), a.sin(), 0.0), Vec3::new(-a.sin(), a.cos(), 0.0))
    } else {
        let e1 = Vec3::new(0.6, 0.48, 0.64);
        let e2 = Vec3::new(-0.8, 0.36, 0.48);
        (e1, e2)
    };
    let p0 = e1 * d - e2 * half;
    let x = p0 + e2 * (f0 * chord * speed);
    Ok(PhaseState::new(t_minus_s, x, e2 * speed))
}

/// Grazing scan of the four Jacobian blocks at fixed |v| and t − s.
pub fn scaling_exponents(
    domain: &ConvexDomain,
    bc: BoundaryCondition,
    scan: &JacobianScanConfig,
) -> Result<JacobianScan> {
    let rows: Vec<Option<JacobianScanRow>> = scan
        .alphas
        .par_iter()
        .map(|&a| -> Result<Option<JacobianScanRow>> {
            let st = grazing_family_state(domain, a, scan.speed, scan.t_minus_s, scan.phase)?;
            match fd_trajectory_jacobian(domain, bc, &st, 0.0, scan.step) {
                Ok(j) => Ok(Some(JacobianScanRow {
                    alpha: alpha(domain, &st.x, &st.v)?,
                    sup_dx_x: sup_norm(&j.dx_x()),
                    sup_dv_x: sup_norm(&j.dv_x()),
                    sup_dx_v: sup_norm(&j.dx_v()),
                    sup_dv_v: sup_norm(&j.dv_v()),
                    h_used: j.h_used(),
                })),
                Err(KinError::SegmentCrossing) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let skipped = rows.iter().filter(|r| r.is_none()).count();
    let rows: Vec<JacobianScanRow> = rows.into_iter().flatten().collect();
    let al: Vec<f64> = rows.iter().map(|r| r.alpha).collect();
    let fit = |f: fn(&JacobianScanRow) -> f64| {
        let q: Vec<f64> = rows.iter().map(f).collect();
        scaling_fit(&al, &q)
    };
    Ok(JacobianScan {
        dx_x: fit(|r| r.sup_dx_x),
        dv_x: fit(|r| r.sup_dv_x),
        dx_v: fit(|r| r.sup_dx_v),
        dv_v: fit(|r| r.sup_dv_v),
        rows,
        skipped,
    })
}

/// Derivatives of a specular disk trajectory at time s from the closed form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiskDerivatives {
    pub ell: usize,
    pub alpha: f64,
    pub x_s: Vec3,
    pub v_s: Vec3,
    /// ∂ₙ = x̂·∇ₓ at fixed Cartesian velocity.
    pub dn_x: Vec3,
    pub dn_v: Vec3,
    /// |∂ₙX·n̂⊥| and |∂ₙX·n̂| with n̂ = X(s)/|X(s)|.
    pub dn_x_tangential: f64,
    pub dn_x_normal: f64,
    /// |∂ₙV·n̂|.
    pub dn_v_normal: f64,
    pub dx_x: Mat3,
    pub dv_x: Mat3,
    pub dx_v: Mat3,
    pub dv_v: Mat3,
    /// ∂X/∂v_θ with v_θ the angular velocity component at x.
    pub dvtheta_x: Vec3,
}

/// Closed-form derivatives of (X_cl(s), V_cl(s)) for a specular disk cycle.
pub fn disk_normal_derivatives(domain: &ConvexDomain, state: &PhaseState, s: f64) -> Result<DiskDerivatives> {
    let dc = DiskCycle::new(domain, state)?;
    let v0 = domain.planar(&state.v);
    let a = alpha(domain, &state.x, &v0)?;
    let ell = dc.segment_index(s);
    let mut dx_x = Mat3::zeros();
    let mut dv_x = Mat3::zeros();
    let mut dx_v = Mat3::zeros();
    let mut dv_v = Mat3::zeros();
    let (x_s, v_s);
    if ell == 0 {
        x_s = state.x - (state.t - s) * v0;
        v_s = v0;
        dx_x = identity(domain);
        dv_x = -(state.t - s) * identity(domain);
        dv_v = identity(domain);
    } else {
        let b = dc.bounce(ell);
        if (state.t + b.dt.re - s).abs() < BOUNCE_TIME_GUARD {
            return Err(KinError::AtBounceTime(s));
        }
        let rad = dc.radius;
        let tl_minus_s = state.t + b.dt.re - s;
        let (ct, st) = (b.theta.re.cos(), b.theta.re.sin());
        let (cp, sp) = (b.psi.re.cos(), b.psi.re.sin());
        let vl = Vec3::new(b.speed.re * cp, b.speed.re * sp, 0.0);
        x_s = Vec3::new(rad * ct, rad * st, 0.0) - tl_minus_s * vl;
        v_s = vl;
        let comp = |d: &D4, k: usize| d.eps[k];
        for k in 0..4 {
            let dvl = Vec3::new(
                comp(&b.speed, k) * cp - b.speed.re * sp * comp(&b.psi, k),
                comp(&b.speed, k) * sp + b.speed.re * cp * comp(&b.psi, k),
                0.0,
            );
            let dxl = Vec3::new(-rad * st, rad * ct, 0.0) * comp(&b.theta, k);
            let dx = dxl - vl * comp(&b.dt, k) - dvl * tl_minus_s;
            let (mx, mv, col) = if k < 2 { (&mut dx_x, &mut dx_v, k) } else { (&mut dv_x, &mut dv_v, k - 2) };
            mx.set_column(col, &dx);
            mv.set_column(col, &dvl);
        }
    }
    let xh = Vec3::new(state.x[0], state.x[1], 0.0).normalize();
    let th = Vec3::new(-xh[1], xh[0], 0.0);
    let dn_x = dx_x * xh;
    let dn_v = dx_v * xh;
    let nh = Vec3::new(x_s[0], x_s[1], 0.0).normalize();
    let nperp = Vec3::new(-nh[1], nh[0], 0.0);
    Ok(DiskDerivatives {
        ell,
        alpha: a,
        x_s,
        v_s,
        dn_x,
        dn_v,
        dn_x_tangential: dn_x.dot(&nperp).abs(),
        dn_x_normal: dn_x.dot(&nh).abs(),
        dn_v_normal: dn_v.dot(&nh).abs(),
        dx_x,
        dv_x,
        dx_v,
        dv_v,
        dvtheta_x: dv_x * th,
    })
}

/// Disk state for the normal-derivative scans: |v| = 1, θ = θ₀, radial
/// velocity √(α/8) and (1 − r²)v_θ² = α/8, so α = 4D exactly. Returns the
/// state and the evaluation time `s` placed at fraction `phase` of its
/// segment with t − s close to `t_minus_s`.
pub fn disk_grazing_state(alpha: f64, theta0: f64, t: f64, t_minus_s: f64, phase: f64) -> Result<(PhaseState, f64)> {
    let vn = (alpha / 8.0).sqrt();
    if vn >= 1.0 {
        return Err(KinError::ParameterViolation(format!("alpha {alpha} too large")));
    }
    let vt = (1.0 - vn * vn).sqrt();
    let r = (1.0 - alpha / (8.0 * vt * vt)).sqrt();
    let xh = Vec3::new(theta0.cos(), theta0.sin(), 0.0);
    let th = Vec3::new(-theta0.sin(), theta0.cos(), 0.0);
    let st = PhaseState::new(t, xh * r, xh * vn + th * vt);
    let d = 0.5 * alpha.sqrt(); // √D with D = α/4
    let first = r * vn + d; // t − t¹
    let gap = 2.0 * d;
    // t − s = first + (k + 1 − phase)·gap, with k chosen to land near t_minus_s.
    let k = ((t_minus_s - first) / gap - (1.0 - phase)).round().max(0.0);
    let s = t - (first + (k + 1.0 - phase) * gap);
    Ok((st, s))
}

/// Check of a computed cycle against the closed-form disk cycle.
pub fn max_disk_cycle_discrepancy(a: &Cycle, b: &Cycle) -> f64 {
    a.entries
        .iter()
        .zip(&b.entries)
        .skip(1)
        .map(|(p, q)| (p.t - q.t).abs().max((p.x - q.x).norm()).max((p.v - q.v).norm()))
        .fold(if a.entries.len() == b.entries.len() { 0.0 } else { f64::INFINITY }, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn sphere() -> ConvexDomain {
        ConvexDomain::sphere(1.0).unwrap()
    }

    fn fd_exit(d: &ConvexDomain, x: &Vec3, v: &Vec3, h: f64) -> (Vec3, Vec3, Mat3, Mat3) {
        let mut gx = Vec3::zeros();
        let mut gv = Vec3::zeros();
        let mut mx = Mat3::zeros();
        let mut mv = Mat3::zeros();
        for j in 0..d.dim() {
            let mut e = Vec3::zeros();
            e[j] = h;
            let p = d.backward_exit_time(&(x + e), v).unwrap();
            let m = d.backward_exit_time(&(x - e), v).unwrap();
            gx[j] = (p.t_b - m.t_b) / (2.0 * h);
            mx.set_column(j, &((p.x_b - m.x_b) / (2.0 * h)));
            let p = d.backward_exit_time(x, &(v + e)).unwrap();
            let m = d.backward_exit_time(x, &(v - e)).unwrap();
            gv[j] = (p.t_b - m.t_b) / (2.0 * h);
            mv.set_column(j, &((p.x_b - m.x_b) / (2.0 * h)));
        }
        (gx, gv, mx, mv)
    }

    #[test]
    fn exit_derivative_examples() {
        let d = d_exit(&sphere(), &Vec3::zeros(), &Vec3::x()).unwrap();
        assert_relative_eq!(d.dx_tb, Vec3::x());
        assert_relative_eq!(d.dv_tb, -Vec3::x());
        assert_eq!(d.dx_xb, Mat3::identity() - Vec3::x() * d.dx_tb.transpose());
        assert!(matches!(d_exit(&sphere(), &Vec3::x(), &Vec3::y()), Err(KinError::GrazingExit)));
    }

    #[test]
    fn bounce_back_examples() {
        let disk = ConvexDomain::disk2d(1.0).unwrap();
        let st = PhaseState::new(5.0, Vec3::new(0.5, 0.0, 0.0), Vec3::y());
        let d3 = bounce_back_cycle_derivatives(&disk, &st, 3).unwrap();
        assert_eq!(d3.dx_v, Mat3::zeros());
        assert_eq!(d3.dv_v, -identity(&disk));
        let h = 1e-6;
        for j in 0..2 {
            let mut e = Vec3::zeros();
            e[j] = h;
            let t3 = |x: Vec3| {
                build_cycle(&disk, BoundaryCondition::BounceBack, &PhaseState::new(5.0, x, st.v), 0.0, 100)
                    .unwrap()
                    .entries[3]
                    .t
            };
            let fd = (t3(st.x + e) - t3(st.x - e)) / (2.0 * h);
            assert!((fd - d3.dx_t[j]).abs() <= 1e-5 * (1.0 + fd.abs()), "{j}: {fd} {}", d3.dx_t[j]);
        }
        // At the centre of a sphere the bounce gap 2/|v| depends on |v| only.
        let d = bounce_back_cycle_derivatives(&sphere(), &PhaseState::new(9.0, Vec3::zeros(), Vec3::x()), 2).unwrap();
        assert_relative_eq!(d.dv_gap, -2.0 * Vec3::x(), epsilon = 1e-14);
        assert_relative_eq!(d.dx_gap, Vec3::zeros(), epsilon = 1e-14);
    }

    #[test]
    fn free_flight_jacobian_is_exact_block() {
        let st = PhaseState::new(1.0, Vec3::new(0.1, 0.2, -0.1), Vec3::new(0.3, 0.2, 0.1));
        let j = fd_trajectory_jacobian(&sphere(), BoundaryCondition::Specular, &st, 0.4, FdStep::Fixed(1e-4)).unwrap();
        assert_eq!(j.ell, 0);
        let mut expect = SMatrix::<f64, 6, 7>::zeros();
        for i in 0..3 {
            expect[(i, 0)] = -st.v[i];
            expect[(i, 1 + i)] = 1.0;
            expect[(i, 4 + i)] = -0.6;
            expect[(3 + i, 4 + i)] = 1.0;
        }
        assert!((j.matrix - expect).abs().max() < 1e-7, "{}", j.matrix - expect);
    }

    #[test]
    fn diffuse_jacobian_rejected() {
        let st = PhaseState::new(1.0, Vec3::zeros(), Vec3::x());
        assert!(fd_trajectory_jacobian(&sphere(), BoundaryCondition::diffuse(0), &st, 0.5, FdStep::default()).is_err());
    }

    #[test]
    fn fd_jacobian_matches_bounce_back_formulas() {
        let q = ConvexDomain::quartic_ball(0.1).unwrap();
        let st = PhaseState::new(4.0, Vec3::new(0.2, -0.3, 0.1), Vec3::new(0.7, 0.5, -0.4));
        let c = build_cycle(&q, BoundaryCondition::BounceBack, &st, 0.0, 100).unwrap();
        let ell = c.segment_index(0.0);
        assert!(ell >= 2);
        let j = fd_trajectory_jacobian(&q, BoundaryCondition::BounceBack, &st, 0.0, FdStep::Auto { rel: 1e-4 }).unwrap();
        let an = bounce_back_cycle_derivatives(&q, &st, ell).unwrap();
        // X(0) = xℓ − tℓ vℓ on segment ℓ.
        let dx_x = an.dx_x - an.v * an.dx_t.transpose();
        let dv_x = an.dv_x - an.v * an.dv_t.transpose() - an.t * an.dv_v;
        let scale = 1.0 + sup_norm(&dx_x).max(sup_norm(&dv_x));
        assert!(sup_norm(&(j.dx_x() - dx_x)) <= 1e-4 * scale);
        assert!(sup_norm(&(j.dv_x() - dv_x)) <= 1e-4 * scale);
        assert!(sup_norm(&(j.dv_v() - an.dv_v)) <= 1e-6);
        assert!(sup_norm(&j.dx_v()) <= 1e-6);
    }

    #[test]
    fn fd_jacobian_matches_disk_closed_form() {
        let disk = ConvexDomain::disk2d(1.0).unwrap();
        let st = PhaseState::new(6.0, Vec3::new(0.6, 0.3, 0.0), Vec3::new(-0.2, 0.9, 0.0));
        let s = 0.37;
        let an = disk_normal_derivatives(&disk, &st, s).unwrap();
        assert!(an.ell >= 2);
        let j = fd_trajectory_jacobian(&disk, BoundaryCondition::Specular, &st, s, FdStep::Auto { rel: 1e-4 }).unwrap();
        for (a, b) in [(an.dx_x, j.dx_x()), (an.dv_x, j.dv_x()), (an.dx_v, j.dx_v()), (an.dv_v, j.dv_v())] {
            assert!(sup_norm(&(a - b)) <= 1e-4 * (1.0 + sup_norm(&a)), "{a} {b}");
        }
        let c = build_cycle(&disk, BoundaryCondition::Specular, &st, s, 100).unwrap();
        let (x, v) = c.eval(s).unwrap();
        assert_relative_eq!(x, an.x_s, epsilon = 1e-12);
        assert_relative_eq!(v, an.v_s, epsilon = 1e-12);
    }

    #[test]
    fn grazing_family_hits_target_alpha_and_phase() {
        for d in [sphere(), ConvexDomain::disk2d(1.0).unwrap()] {
            for a in [1e-6, 1e-3, 1e-1] {
                let st = grazing_family_state(&d, a, 1.0, 3.0, 0.25).unwrap();
                assert_relative_eq!(alpha(&d, &st.x, &st.v).unwrap(), a, max_relative = 1e-6);
                let c = build_cycle(&d, BoundaryCondition::Specular, &st, 0.0, DEFAULT_BOUNCE_CAP).unwrap();
                let ell = c.segment_index(0.0);
                if ell >= 1 {
                    let hi = c.entries[ell].t;
                    let lo = hi - a.sqrt();
                    assert!(((0.0 - lo) / (hi - lo) - 0.25).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn disk_grazing_state_phase() {
        let disk = ConvexDomain::disk2d(1.0).unwrap();
        for a in [1e-6, 1e-4, 1e-2] {
            let (st, s) = disk_grazing_state(a, 0.0, 2.0, 2.0, 0.25).unwrap();
            assert_relative_eq!(alpha(&disk, &st.x, &st.v).unwrap(), a, max_relative = 1e-8);
            let dc = DiskCycle::new(&disk, &st).unwrap();
            let ell = dc.segment_index(s);
            let hi = st.t + dc.bounce(ell).dt.re;
            assert!(((s - (hi - dc.gap())) / dc.gap() - 0.25).abs() < 1e-6);
            assert!((st.t - s - 2.0).abs() <= dc.gap());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn exit_derivatives_match_fd(which in 0usize..3, seed in any::<u64>(),
                                     vx in -2.0f64..2.0, vy in -2.0f64..2.0, vz in -2.0f64..2.0) {
            let doms = [sphere(), ConvexDomain::ellipsoid(2.0, 1.0, 1.0).unwrap(), ConvexDomain::quartic_ball(0.1).unwrap()];
            let d = &doms[which];
            let x = d.sample_closure(&mut crate::rng::stream(seed, &[])) * 0.95;
            let v = Vec3::new(vx, vy, vz);
            prop_assume!(v.norm() > 0.2);
            let an = d_exit(d, &x, &v).unwrap();
            prop_assume!(an.dx_tb.norm() < 1e3);
            let (gx, gv, mx, mv) = fd_exit(d, &x, &v, 1e-6);
            let sc = 1.0 + an.dx_tb.norm() + an.dv_tb.norm();
            prop_assert!((gx - an.dx_tb).norm() <= 1e-5 * sc);
            prop_assert!((gv - an.dv_tb).norm() <= 1e-5 * sc);
            prop_assert!(sup_norm(&(mx - an.dx_xb)) <= 1e-5 * sc * (1.0 + v.norm()));
            prop_assert!(sup_norm(&(mv - an.dv_xb)) <= 1e-5 * sc * (1.0 + v.norm()));
            // Chain-rule identity holds to round-off.
            let ident = Mat3::identity() - v * an.dx_tb.transpose();
            prop_assert!(sup_norm(&(ident - an.dx_xb)) <= 1e-14 * (1.0 + sup_norm(&ident)));
        }
    }
}
