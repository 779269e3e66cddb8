//! Hand-computed values through the public API.

use std::f64::consts::PI;

use approx::assert_relative_eq;
use kincycle_core::collision::{nu_loss, AngularCutoff, CollisionParams, QuadConfig};
use kincycle_core::jacobians::{bounce_back_cycle_derivatives, d_exit};
use kincycle_core::kinetic_distance::alpha;
use kincycle_core::trajectories::{build_cycle, disk_specular_cycle, DEFAULT_BOUNCE_CAP};
use kincycle_core::{BoundaryCondition, ConvexDomain, Mat3, PhaseState, Vec3};

#[test]
fn exit_times_from_the_quadratic_formula() {
    let sphere = ConvexDomain::sphere(1.0).unwrap();
    let e = sphere.backward_exit_time(&Vec3::new(0.5, 0.0, 0.0), &Vec3::new(1.0, 0.0, 0.0)).unwrap();
    assert_relative_eq!(e.t_b, 1.5, epsilon = 1e-14);
    assert_relative_eq!(e.x_b, Vec3::new(-1.0, 0.0, 0.0), epsilon = 1e-14);

    let disk = ConvexDomain::disk2d(1.0).unwrap();
    let e = disk.backward_exit_time(&Vec3::new(0.5, 0.0, 0.0), &Vec3::new(0.0, 1.0, 0.0)).unwrap();
    assert_relative_eq!(e.t_b, 0.75f64.sqrt(), epsilon = 1e-14);

    // Semi-axis 2 along x.
    let ell = ConvexDomain::ellipsoid(2.0, 1.0, 1.0).unwrap();
    let e = ell.backward_exit_time(&Vec3::zeros(), &Vec3::new(1.0, 0.0, 0.0)).unwrap();
    assert_relative_eq!(e.t_b, 2.0, epsilon = 1e-14);
}

#[test]
fn kinetic_distance_on_the_sphere() {
    // α = (v·∇ξ)² − 2ξ v·∇²ξ v = 0 − 2(−0.75)(2) = 3.
    let sphere = ConvexDomain::sphere(1.0).unwrap();
    let a = alpha(&sphere, &Vec3::new(0.5, 0.0, 0.0), &Vec3::new(0.0, 1.0, 0.0)).unwrap();
    assert_relative_eq!(a, 3.0, epsilon = 1e-14);
}

#[test]
fn exit_derivatives_at_the_centre() {
    let sphere = ConvexDomain::sphere(1.0).unwrap();
    let d = d_exit(&sphere, &Vec3::zeros(), &Vec3::new(1.0, 0.0, 0.0)).unwrap();
    assert_relative_eq!(d.t_b, 1.0, epsilon = 1e-14);
    assert_relative_eq!(d.dx_tb, Vec3::new(1.0, 0.0, 0.0), epsilon = 1e-14);
    assert_relative_eq!(d.dv_tb, Vec3::new(-1.0, 0.0, 0.0), epsilon = 1e-14);
}

#[test]
fn disk_bounce_times() {
    let disk = ConvexDomain::disk2d(1.0).unwrap();
    let st = PhaseState::new(1.0, Vec3::new(0.5, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0));
    let c = disk_specular_cycle(&disk, &st, -3.0, 100).unwrap();
    let t1 = 1.0 - 0.75f64.sqrt();
    assert_relative_eq!(c.entries[1].t, t1, epsilon = 1e-14);
    assert_relative_eq!(c.entries[2].t - c.entries[1].t, -2.0 * 0.75f64.sqrt(), epsilon = 1e-13);
    // Chords of a specular disk cycle are congruent.
    for w in c.entries[1..].windows(2) {
        assert_relative_eq!(w[0].t - w[1].t, 2.0 * 0.75f64.sqrt(), epsilon = 1e-12);
    }
}

#[test]
fn bounce_back_alternates_between_two_points() {
    let disk = ConvexDomain::disk2d(1.0).unwrap();
    let v = Vec3::new(0.0, 1.0, 0.0);
    let st = PhaseState::new(2.0, Vec3::new(0.5, 0.0, 0.0), v);
    let c = build_cycle(&disk, BoundaryCondition::BounceBack, &st, -2.0, DEFAULT_BOUNCE_CAP).unwrap();
    let tau = 2.0 * 0.75f64.sqrt();
    assert_relative_eq!(c.entries[1].t, 2.0 - 0.75f64.sqrt(), epsilon = 1e-14);
    assert_relative_eq!(c.entries[2].t, c.entries[1].t - tau, epsilon = 1e-13);
    for (l, e) in c.entries.iter().enumerate().skip(1) {
        let sign = if l % 2 == 0 { 1.0 } else { -1.0 };
        assert_relative_eq!(e.v, sign * v, epsilon = 1e-15);
        let x = if l % 2 == 1 { Vec3::new(0.5, -0.75f64.sqrt(), 0.0) } else { Vec3::new(0.5, 0.75f64.sqrt(), 0.0) };
        assert_relative_eq!(e.x, x, epsilon = 1e-13);
    }
}

#[test]
fn bounce_back_velocities_do_not_depend_on_position() {
    // ∂ₓvℓ = 0 for every ℓ: vℓ = (−1)^ℓ v.
    let ell = ConvexDomain::ellipsoid(2.0, 1.0, 1.0).unwrap();
    let st = PhaseState::new(0.0, Vec3::new(0.3, -0.2, 0.1), Vec3::new(0.4, 0.9, -0.3));
    for l in 0..6 {
        let d = bounce_back_cycle_derivatives(&ell, &st, l).unwrap();
        assert_eq!(d.dx_v, Mat3::zeros(), "ell = {l}");
    }
}

#[test]
fn collision_frequency_closed_forms() {
    let sqrt_mu = |u: &Vec3| (-0.25 * u.norm_squared()).exp();
    let quad = QuadConfig::default();
    let base = 4.0 * PI * (2.0 * PI).powf(1.5);
    // κ = 0, q₀ ≡ 1: ν(μ) = 4π(2π)^{3/2} for every v.
    let flat = CollisionParams::new(0.0, AngularCutoff::One).unwrap();
    for v in [Vec3::zeros(), Vec3::new(1.0, -2.0, 0.5)] {
        assert_relative_eq!(nu_loss(&sqrt_mu, &v, &flat, &quad).unwrap(), base, max_relative = 1e-6);
    }
    // κ = 1 at v = 0: the extra factor is E|U| = 2√(2/π).
    let hard = CollisionParams::new(1.0, AngularCutoff::One).unwrap();
    let nu = nu_loss(&sqrt_mu, &Vec3::zeros(), &hard, &quad).unwrap();
    assert_relative_eq!(nu, base * 2.0 * (2.0 / PI).sqrt(), max_relative = 1e-6);
}
