//! Backward characteristic cycles for specular, bounce-back and diffuse
//! boundary conditions.

pub mod disk;

pub use disk::{disk_specular_cycle, DiskCycle};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{KinError, Result};
use crate::geometry::{ConvexDomain, PhaseState};
use crate::kinetic_distance::alpha;
use crate::Vec3;

/// Default cap on the number of bounces in one cycle.
pub const DEFAULT_BOUNCE_CAP: usize = 1_000_000;
/// Exit times below this are treated as a stall when they repeat.
pub const STALL_TIME: f64 = 1e-13;
/// Minimum distance from a bounce time at which trajectories are evaluated.
pub const BOUNCE_TIME_GUARD: f64 = 1e-13;

/// Boundary condition generating the cycle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundaryCondition {
    Specular,
    BounceBack,
    /// Diffuse reflection; `seed` and `trajectory` key the resampling stream.
    Diffuse { seed: u64, trajectory: u64 },
}

impl BoundaryCondition {
    pub fn diffuse(seed: u64) -> Self {
        Self::Diffuse { seed, trajectory: 0 }
    }

    /// Same boundary condition with a different trajectory id (diffuse only).
    pub fn with_trajectory(self, id: u64) -> Self {
        match self {
            Self::Diffuse { seed, .. } => Self::Diffuse { seed, trajectory: id },
            other => other,
        }
    }

    pub fn is_deterministic(&self) -> bool {
        !matches!(self, Self::Diffuse { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Specular => "specular",
            Self::BounceBack => "bounce-back",
            Self::Diffuse { .. } => "diffuse",
        }
    }
}

/// Maxwellian flux law used by diffuse reflection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffuseLaw {
    pub dim: usize,
}

impl DiffuseLaw {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }

    /// μ(v) = e^{−|v|²/2}.
    pub fn mu(v: &Vec3) -> f64 {
        (-0.5 * v.norm_squared()).exp()
    }

    /// c_μ such that c_μ ∫_{n·u>0} μ(u)(n·u) du = 1.
    pub fn c_mu(&self) -> f64 {
        match self.dim {
            2 => 1.0 / (2.0 * std::f64::consts::PI).sqrt(),
            _ => 1.0 / (2.0 * std::f64::consts::PI),
        }
    }

    /// Density of the flux law with respect to Lebesgue measure on {n·u > 0}.
    pub fn density(&self, n: &Vec3, u: &Vec3) -> f64 {
        let un = n.dot(u);
        if un > 0.0 {
            self.c_mu() * Self::mu(u) * un
        } else {
            0.0
        }
    }
}

/// Orthonormal tangent vectors at a point with unit normal `n`, built from a
/// fixed reference direction so they vary smoothly with `n`.
pub fn tangent_basis(n: &Vec3, dim: usize) -> (Vec3, Vec3) {
    if dim == 2 {
        return (Vec3::new(-n[1], n[0], 0.0), Vec3::zeros());
    }
    let mut a = Vec3::new(0.267_261_241_912_424_4, 0.534_522_483_824_848_8, 0.801_783_725_737_273_2);
    if n.dot(&a).abs() > 0.99 {
        a = Vec3::new(0.801_783_725_737_273_2, -0.534_522_483_824_848_8, 0.267_261_241_912_424_4);
    }
    let t1 = (a - n * n.dot(&a)).normalize();
    (t1, n.cross(&t1))
}

/// Draw an outgoing velocity from the flux law c_μ μ(u)(n·u) on {n·u > 0}.
pub fn sample_diffuse_velocity<R: Rng + ?Sized>(law: &DiffuseLaw, n: &Vec3, rng: &mut R) -> Vec3 {
    let u: f64 = rng.random();
    let vn = (-2.0 * (-u).ln_1p()).sqrt();
    let (t1, t2) = tangent_basis(n, law.dim);
    let a: f64 = StandardNormal.sample(rng);
    let mut v = n * vn.max(f64::MIN_POSITIVE) + t1 * a;
    if law.dim == 3 {
        let b: f64 = StandardNormal.sample(rng);
        v += t2 * b;
    }
    v
}

/// One bounce of a cycle: time, position and post-bounce velocity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CycleEntry {
    pub t: f64,
    pub x: Vec3,
    pub v: Vec3,
    /// Grazing ratio |v·n(x)|/|v|; NaN for an interior starting point.
    pub r: f64,
}

/// The backward cycle (tℓ, xℓ, vℓ), ℓ = 0..ℓ_max, of a phase state.
#[derive(Clone, Debug, PartialEq)]
pub struct Cycle {
    pub bc: BoundaryCondition,
    pub entries: Vec<CycleEntry>,
    pub s_min: f64,
}

fn grazing_ratio(domain: &ConvexDomain, x: &Vec3, v: &Vec3) -> f64 {
    match domain.outward_normal(x) {
        Ok(n) => n.dot(v).abs() / v.norm(),
        Err(_) => f64::NAN,
    }
}

fn reflect(domain: &ConvexDomain, bc: BoundaryCondition, ell: usize, x: &Vec3, v: &Vec3) -> Result<Vec3> {
    let n = domain.outward_normal(x)?;
    Ok(match bc {
        BoundaryCondition::Specular => v - 2.0 * n * n.dot(v),
        BoundaryCondition::BounceBack => -v,
        BoundaryCondition::Diffuse { seed, trajectory } => {
            let mut rng = crate::rng::stream(seed, &[trajectory, ell as u64]);
            sample_diffuse_velocity(&DiffuseLaw::new(domain.dim()), &n, &mut rng)
        }
    })
}

/// Build the backward cycle of `state` down to time `s_min`.
pub fn build_cycle(
    domain: &ConvexDomain,
    bc: BoundaryCondition,
    state: &PhaseState,
    s_min: f64,
    cap: usize,
) -> Result<Cycle> {
    if s_min > state.t {
        return Err(KinError::ParameterViolation(format!(
            "s_min = {s_min} exceeds t = {}",
            state.t
        )));
    }
    let v0 = domain.planar(&state.v);
    let r0 = if domain.xi(&state.x).abs() <= domain.boundary_band() {
        grazing_ratio(domain, &state.x, &v0)
    } else {
        f64::NAN
    };
    let mut cycle = Cycle {
        bc,
        entries: vec![CycleEntry { t: state.t, x: state.x, v: v0, r: r0 }],
        s_min,
    };
    if bc == BoundaryCondition::BounceBack {
        bounce_back_tail(domain, &mut cycle, cap)?;
        return Ok(cycle);
    }
    let mut small_steps = 0;
    loop {
        let last = *cycle.entries.last().expect("cycle has an initial entry");
        let e = domain.backward_exit_time(&last.x, &last.v)?;
        let t_next = last.t - e.t_b;
        if t_next < s_min {
            return Ok(cycle);
        }
        if e.t_b < STALL_TIME {
            small_steps += 1;
            if small_steps >= 2 {
                return Err(KinError::GrazingStall);
            }
        } else {
            small_steps = 0;
        }
        if cycle.entries.len() > cap {
            return Err(KinError::BounceCapExceeded { cap, partial: Box::new(cycle) });
        }
        let ell = cycle.entries.len();
        let v = reflect(domain, bc, ell, &e.x_b, &last.v)?;
        cycle.entries.push(CycleEntry {
            t: t_next,
            x: e.x_b,
            v,
            r: e.incidence.abs() / last.v.norm(),
        });
    }
}

/// Bounce-back cycles revisit two points; after the first bounce the times
/// are an arithmetic sequence.
fn bounce_back_tail(domain: &ConvexDomain, cycle: &mut Cycle, cap: usize) -> Result<()> {
    let first = cycle.entries[0];
    let e1 = domain.backward_exit_time(&first.x, &first.v)?;
    let t1 = first.t - e1.t_b;
    if t1 < cycle.s_min {
        return Ok(());
    }
    let v1 = -first.v;
    let e2 = domain.backward_exit_time(&e1.x_b, &v1)?;
    let tau = e2.t_b;
    if tau < STALL_TIME && t1 - tau >= cycle.s_min {
        return Err(KinError::GrazingStall);
    }
    let count = ((t1 - cycle.s_min) / tau).floor() as usize + 1;
    let r = e1.incidence.abs() / first.v.norm();
    let entries_needed = count.min(cap.saturating_add(1));
    for ell in 1..=entries_needed {
        let (x, v) = if ell % 2 == 1 { (e1.x_b, v1) } else { (e2.x_b, first.v) };
        cycle.entries.push(CycleEntry { t: t1 - (ell - 1) as f64 * tau, x, v, r });
    }
    if count > cap {
        cycle.entries.truncate(cap + 1);
        return Err(KinError::BounceCapExceeded { cap, partial: Box::new(cycle.clone()) });
    }
    Ok(())
}

impl Cycle {
    pub fn t(&self) -> f64 {
        self.entries[0].t
    }

    pub fn x(&self) -> Vec3 {
        self.entries[0].x
    }

    pub fn v(&self) -> Vec3 {
        self.entries[0].v
    }

    /// Number of bounces recorded.
    pub fn bounces(&self) -> usize {
        self.entries.len() - 1
    }

    /// ℓ_* with t^{ℓ_*+1} ≤ s < t^{ℓ_*} (ℓ_* = 0 for s = t).
    pub fn segment_index(&self, s: f64) -> usize {
        let k = self.entries.partition_point(|e| e.t > s);
        k.saturating_sub(1)
    }

    /// Distance from `s` to the closest bounce time of this cycle (excluding t⁰).
    pub fn bounce_time_distance(&self, s: f64) -> f64 {
        let ell = self.segment_index(s);
        let mut d = f64::INFINITY;
        if ell >= 1 {
            d = d.min((self.entries[ell].t - s).abs());
        }
        if let Some(next) = self.entries.get(ell + 1) {
            d = d.min((s - next.t).abs());
        }
        d
    }

    /// (X_cl(s), V_cl(s)).
    pub fn eval(&self, s: f64) -> Result<(Vec3, Vec3)> {
        if s > self.t() || s < self.s_min {
            return Err(KinError::ParameterViolation(format!(
                "s = {s} outside [{}, {}]",
                self.s_min,
                self.t()
            )));
        }
        if self.bounce_time_distance(s) < BOUNCE_TIME_GUARD {
            return Err(KinError::AtBounceTime(s));
        }
        let e = &self.entries[self.segment_index(s)];
        Ok((e.x - (e.t - s) * e.v, e.v))
    }
}

/// (X_cl(s), V_cl(s)) of a cycle.
pub fn eval_trajectory(cycle: &Cycle, s: f64) -> Result<(Vec3, Vec3)> {
    cycle.eval(s)
}

/// ℓ_* together with ℓ_*·√α / (|t−s||v|² e^{𝒞|v|(t−s)}).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BounceCount {
    pub ell: usize,
    pub ratio: f64,
}

pub fn bounce_count(domain: &ConvexDomain, cycle: &Cycle, s: f64, vl_constant: f64) -> Result<BounceCount> {
    let ell = cycle.segment_index(s);
    let v = cycle.v();
    let a = alpha(domain, &cycle.x(), &v)?;
    let dt = cycle.t() - s;
    let scale = dt * v.norm_squared() * (vl_constant * v.norm() * dt).exp();
    let ratio = if scale > 0.0 { ell as f64 * a.sqrt() / scale } else { 0.0 };
    Ok(BounceCount { ell, ratio })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn sphere() -> ConvexDomain {
        ConvexDomain::sphere(1.0).unwrap()
    }

    #[test]
    fn diameter_cycle() {
        let st = PhaseState::new(3.0, Vec3::zeros(), Vec3::x());
        let c = build_cycle(&sphere(), BoundaryCondition::Specular, &st, 0.0, 100).unwrap();
        assert_eq!(c.entries.len(), 3);
        assert_relative_eq!(c.entries[1].t, 2.0);
        assert_relative_eq!(c.entries[1].x, -Vec3::x());
        assert_relative_eq!(c.entries[1].v, -Vec3::x());
        assert_relative_eq!(c.entries[2].t, 0.0, epsilon = 1e-15);
        assert_relative_eq!(c.entries[2].x, Vec3::x());
        assert_relative_eq!(c.entries[2].v, Vec3::x());
        let (x, v) = c.eval(1.0).unwrap();
        assert_relative_eq!(x, Vec3::zeros(), epsilon = 1e-15);
        assert_relative_eq!(v, -Vec3::x());
        assert_eq!(c.eval(3.0).unwrap(), (Vec3::zeros(), Vec3::x()));
        let (x, _) = c.eval(2.5).unwrap();
        assert_relative_eq!(x, Vec3::new(-0.5, 0.0, 0.0));
        assert!(matches!(c.eval(2.0), Err(KinError::AtBounceTime(_))));
        assert_eq!(c.segment_index(0.5), 1);
        assert_eq!(c.segment_index(2.5), 0);
        let bc = bounce_count(&sphere(), &c, 0.5, 0.0).unwrap();
        assert_eq!(bc.ell, 1);
    }

    #[test]
    fn bounce_back_disk_example() {
        let d = ConvexDomain::disk2d(1.0).unwrap();
        let st = PhaseState::new(2.0, Vec3::new(0.5, 0.0, 0.0), Vec3::y());
        let c = build_cycle(&d, BoundaryCondition::BounceBack, &st, -1.0, 100).unwrap();
        let s = 0.75f64.sqrt();
        assert_relative_eq!(c.entries[1].t, 2.0 - s, epsilon = 1e-15);
        assert_relative_eq!(c.entries[1].x, Vec3::new(0.5, -s, 0.0), epsilon = 1e-15);
        // t_b(x¹, v¹) is the full chord 2√0.75.
        assert_relative_eq!(c.entries[2].t, 2.0 - 3.0 * s, epsilon = 1e-14);
        assert_relative_eq!(c.entries[2].x, Vec3::new(0.5, s, 0.0), epsilon = 1e-15);
        assert_eq!(c.entries[1].v, -Vec3::y());
        assert_eq!(c.entries[2].v, Vec3::y());
        assert_eq!(c.entries.len(), 3);
    }

    #[test]
    fn bounce_back_matches_iterated_exits() {
        let q = ConvexDomain::quartic_ball(0.1).unwrap();
        let st = PhaseState::new(9.0, Vec3::new(0.2, -0.1, 0.3), Vec3::new(0.3, 0.9, -0.2));
        let c = build_cycle(&q, BoundaryCondition::BounceBack, &st, 0.0, 1000).unwrap();
        let (mut t, mut x, mut v) = (st.t, st.x, st.v);
        for e in &c.entries[1..] {
            let ex = q.backward_exit_time(&x, &v).unwrap();
            t -= ex.t_b;
            x = ex.x_b;
            v = -v;
            assert_relative_eq!(e.t, t, epsilon = 1e-12);
            assert_relative_eq!(e.x, x, epsilon = 1e-12);
            assert_eq!(e.v, v);
        }
    }

    #[test]
    fn stall_and_cap() {
        let st = PhaseState::new(1e6, Vec3::zeros(), Vec3::x());
        let err = build_cycle(&sphere(), BoundaryCondition::Specular, &st, 0.0, 10).unwrap_err();
        match err {
            KinError::BounceCapExceeded { cap, partial } => {
                assert_eq!(cap, 10);
                assert_eq!(partial.entries.len(), 11);
            }
            e => panic!("unexpected {e:?}"),
        }
        let err = build_cycle(&sphere(), BoundaryCondition::BounceBack, &st, 0.0, 10).unwrap_err();
        assert!(matches!(err, KinError::BounceCapExceeded { .. }));
        let grazing = PhaseState::new(1.0, Vec3::x(), Vec3::y());
        let err = build_cycle(&sphere(), BoundaryCondition::Specular, &grazing, 0.0, 10).unwrap_err();
        assert!(matches!(err, KinError::GrazingStall));
    }

    #[test]
    fn diffuse_flux_moments() {
        let law = DiffuseLaw::new(3);
        let n = Vec3::new(0.0, 0.6, 0.8);
        let mut rng = crate::rng::stream(11, &[]);
        let m = 1_000_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        let (mut t1, mut t2) = (Vec3::zeros(), Vec3::zeros());
        for _ in 0..m {
            let v = sample_diffuse_velocity(&law, &n, &mut rng);
            let vn = n.dot(&v);
            assert!(vn > 0.0);
            s1 += vn;
            s2 += vn * vn;
            let vt = v - n * vn;
            t1 += vt;
            t2 += vt.component_mul(&vt);
        }
        let mf = m as f64;
        let mean = s1 / mf;
        let se = ((s2 / mf - mean * mean) / mf).sqrt();
        assert!((mean - (std::f64::consts::PI / 2.0).sqrt()).abs() < 4.0 * se, "{mean} {se}");
        for i in 0..3 {
            let mt = t1[i] / mf;
            let st = ((t2[i] / mf - mt * mt) / mf).sqrt();
            assert!(mt.abs() < 4.0 * st.max(1e-300));
        }
    }

    #[test]
    fn diffuse_cycle_velocities_point_inward() {
        let st = PhaseState::new(5.0, Vec3::new(0.1, 0.2, 0.3), Vec3::new(1.0, -0.5, 0.2));
        for id in 0..200 {
            let bc = BoundaryCondition::diffuse(5).with_trajectory(id);
            let c = build_cycle(&sphere(), bc, &st, 0.0, 10_000).unwrap();
            for e in &c.entries[1..] {
                let n = sphere().outward_normal(&e.x).unwrap();
                assert!(n.dot(&e.v) > 0.0 && e.v.norm().is_finite());
            }
        }
        let bc = BoundaryCondition::diffuse(5).with_trajectory(3);
        let a = build_cycle(&sphere(), bc, &st, 0.0, 100).unwrap();
        let b = build_cycle(&sphere(), bc, &st, 0.0, 100).unwrap();
        let key = |c: &Cycle| c.entries.iter().map(|e| (e.t, e.x, e.v)).collect::<Vec<_>>();
        assert_eq!(key(&a), key(&b));
        let other = build_cycle(&sphere(), bc.with_trajectory(4), &st, 0.0, 100).unwrap();
        assert_ne!(key(&a), key(&other));
    }

    #[test]
    fn flux_normalisation() {
        // c_μ ∫ μ(u) u_n du over u_n > 0, by quadrature over u_n only.
        let (v, _) = crate::quadrature::integrate(
            |x| x * (-0.5 * x * x).exp(),
            0.0,
            40.0,
            &[],
            Default::default(),
        )
        .unwrap();
        let two_pi = 2.0 * std::f64::consts::PI;
        assert_relative_eq!(DiffuseLaw::new(3).c_mu() * v * two_pi, 1.0, max_relative = 1e-12);
        assert_relative_eq!(DiffuseLaw::new(2).c_mu() * v * two_pi.sqrt(), 1.0, max_relative = 1e-12);
    }

    fn domains() -> Vec<ConvexDomain> {
        vec![
            sphere(),
            ConvexDomain::ellipsoid(2.0, 1.0, 1.0).unwrap(),
            ConvexDomain::disk2d(1.0).unwrap(),
            ConvexDomain::quartic_ball(0.1).unwrap(),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn cycle_invariants(which in 0usize..4, bb in any::<bool>(), seed in any::<u64>(),
                            vx in -2.0f64..2.0, vy in -2.0f64..2.0, vz in -2.0f64..2.0) {
            let d = &domains()[which];
            let bc = if bb { BoundaryCondition::BounceBack } else { BoundaryCondition::Specular };
            let x = d.sample_closure(&mut crate::rng::stream(seed, &[]));
            let v = d.planar(&Vec3::new(vx, vy, vz));
            prop_assume!(v.norm() > 0.1);
            let c = build_cycle(d, bc, &PhaseState::new(4.0, x, v), 0.0, 100_000).unwrap();
            for w in c.entries.windows(2) {
                prop_assert!(w[1].t < w[0].t);
            }
            for (ell, e) in c.entries.iter().enumerate().skip(1) {
                prop_assert!(d.xi(&e.x).abs() <= 1e-12 * d.diameter().powi(2));
                prop_assert!((e.v.norm() - v.norm()).abs() <= 1e-12 * v.norm());
                if bb {
                    let sign = if ell % 2 == 1 { -1.0 } else { 1.0 };
                    prop_assert_eq!(e.v, v * sign);
                    prop_assert_eq!(e.x, c.entries[2 - ell % 2].x);
                }
            }
        }

        #[test]
        fn semigroup(which in 0usize..4, bb in any::<bool>(), seed in any::<u64>(),
                     vx in -2.0f64..2.0, vy in -2.0f64..2.0, vz in -2.0f64..2.0,
                     fs in 0.05f64..0.95, fs2 in 0.0f64..1.0) {
            let d = &domains()[which];
            let bc = if bb { BoundaryCondition::BounceBack } else { BoundaryCondition::Specular };
            let x = d.sample_closure(&mut crate::rng::stream(seed, &[]));
            let v = d.planar(&Vec3::new(vx, vy, vz));
            prop_assume!(v.norm() > 0.3);
            let t = 3.0;
            let c = build_cycle(d, bc, &PhaseState::new(t, x, v), 0.0, 100_000).unwrap();
            let s = fs * t;
            let s2 = fs2 * s;
            prop_assume!(c.bounce_time_distance(s) > 1e-6 && c.bounce_time_distance(s2) > 1e-6);
            let (xs, vs) = c.eval(s).unwrap();
            let c2 = build_cycle(d, bc, &PhaseState::new(s, xs, vs), 0.0, 100_000).unwrap();
            prop_assume!(c2.bounce_time_distance(s2) > 1e-6);
            let (a, va) = c.eval(s2).unwrap();
            let (b, vb) = c2.eval(s2).unwrap();
            prop_assert!((a - b).norm() <= 1e-9, "{} {}", a, b);
            prop_assert!((va - vb).norm() <= 1e-9 * v.norm());
        }
    }
}
