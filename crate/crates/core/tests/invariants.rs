//! Invariants of cycles, exit data and the Monte Carlo driver on random
//! states.

use kincycle_core::kinetic_distance::alpha_drift;
use kincycle_core::rng::stream;
use kincycle_core::stats::mc_estimate;
use kincycle_core::trajectories::{build_cycle, DEFAULT_BOUNCE_CAP};
use kincycle_core::{BoundaryCondition, ConvexDomain, PhaseState};
use proptest::prelude::*;
use rand::Rng;

fn domains() -> Vec<ConvexDomain> {
    vec![
        ConvexDomain::sphere(1.0).unwrap(),
        ConvexDomain::ellipsoid(2.0, 1.0, 1.0).unwrap(),
        ConvexDomain::disk2d(1.0).unwrap(),
        ConvexDomain::quartic_ball(0.1).unwrap(),
    ]
}

/// Interior state with ξ ≤ −1e-3 drawn from the counter-based stream.
fn state(d: &ConvexDomain, seed: u64) -> PhaseState {
    for k in 0.. {
        let mut rng = stream(seed, &[k]);
        let x = d.sample_closure(&mut rng);
        let v = d.random_direction(&mut rng) * (0.5 + rng.random::<f64>());
        if d.xi(&x) <= -1e-3 {
            return PhaseState::new(3.0, x, v);
        }
    }
    unreachable!()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exit_point_lies_on_the_boundary_with_inward_velocity(seed in any::<u64>(), k in 0usize..4) {
        let d = &domains()[k];
        let st = state(d, seed);
        let e = d.backward_exit_time(&st.x, &st.v).unwrap();
        prop_assert!(e.t_b > 0.0);
        prop_assert!(d.xi(&e.x_b).abs() <= 1e-12 * d.diameter().powi(2));
        prop_assert!((e.x_b - (st.x - e.t_b * d.planar(&st.v))).norm() <= 1e-14);
        prop_assert!(e.incidence <= 1e-12);
    }

    #[test]
    fn specular_cycles_keep_speed_and_boundary(seed in any::<u64>(), k in 0usize..4) {
        let d = &domains()[k];
        let st = state(d, seed);
        let c = build_cycle(d, BoundaryCondition::Specular, &st, 0.0, DEFAULT_BOUNCE_CAP).unwrap();
        let speed = d.planar(&st.v).norm();
        for w in c.entries.windows(2) {
            prop_assert!(w[1].t < w[0].t);
        }
        for e in &c.entries[1..] {
            prop_assert!((e.v.norm() - speed).abs() <= 1e-12 * speed);
            prop_assert!(d.xi(&e.x).abs() <= 1e-10);
        }
    }

    #[test]
    fn bounce_back_cycles_retrace_one_chord(seed in any::<u64>(), k in 0usize..4) {
        let d = &domains()[k];
        let st = state(d, seed);
        let c = build_cycle(d, BoundaryCondition::BounceBack, &st, 0.0, DEFAULT_BOUNCE_CAP).unwrap();
        let v = d.planar(&st.v);
        for (l, e) in c.entries.iter().enumerate().skip(1) {
            let sign = if l % 2 == 0 { 1.0 } else { -1.0 };
            prop_assert!((e.v - sign * v).norm() <= 1e-14 * v.norm());
            if l + 2 < c.entries.len() {
                prop_assert!((c.entries[l + 2].x - e.x).norm() <= 1e-10);
            }
        }
    }

    #[test]
    fn alpha_is_invariant_on_quadratic_domains(seed in any::<u64>(), k in 0usize..3, bb in any::<bool>()) {
        let d = &domains()[k];
        let st = state(d, seed);
        let bc = if bb { BoundaryCondition::BounceBack } else { BoundaryCondition::Specular };
        let c = build_cycle(d, bc, &st, 0.0, DEFAULT_BOUNCE_CAP).unwrap();
        prop_assert!(alpha_drift(d, &c) <= 1e-9);
    }
}

#[test]
fn monte_carlo_estimates_do_not_depend_on_thread_count() {
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| mc_estimate(100_003, 9, &[1, 2], |rng| rng.random::<f64>().powi(2)).unwrap())
    };
    let a = run(1);
    let b = run(3);
    assert_eq!(a.mean.to_bits(), b.mean.to_bits());
    assert_eq!(a.stderr.to_bits(), b.stderr.to_bits());
    assert!((a.mean - 1.0 / 3.0).abs() < 4.0 * a.stderr);
}
