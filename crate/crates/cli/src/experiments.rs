//! The experiments behind `kincycle run`. Each one fills an [`Outcome`] with
//! checks, fitted values and CSV tables; a numerical error stops that
//! experiment but keeps the tables it had already produced.

use std::sync::Arc;

use kincycle_core::collision::{
    collision_moment, equilibrium_gain_closed_form, gamma_gain, kernel_integral_check, nu_loss, perturbed_maxwellian,
    AngularCutoff, CollisionParams, KernelBound, McConfig, Moment, QuadConfig,
};
use kincycle_core::constants::velocity_lemma_constant;
use kincycle_core::fit::{log_space, scaling_fit, ScalingFit};
use kincycle_core::jacobians::{
    bounce_back_cycle_derivatives, d_exit, disk_grazing_state, disk_normal_derivatives, max_disk_cycle_discrepancy,
    scaling_exponents, sup_norm, FdStep, JacobianScanConfig,
};
use kincycle_core::kinetic_distance::{alpha_drift_run, velocity_lemma_run, VelocityLemmaRunConfig};
use kincycle_core::nonlocal::{dynamical_scan, u_integral_scan, DynamicalScanConfig, NonlocalParams, SpeedFactor};
use kincycle_core::rng::stream;
use kincycle_core::transport::{
    boundary_lp_scan, grazing_blowup_scan, BlowupScanConfig, BoundaryScanConfig, PhaseFunction, RadialBump,
    Representation, TransportProblem, TrigDatum,
};
use kincycle_core::trajectories::{build_cycle, disk_specular_cycle, DiskCycle, DEFAULT_BOUNCE_CAP};
use kincycle_core::{BoundaryCondition, ConvexDomain, KinError, Mat3, PhaseState, Result, Vec3};
use rand::Rng;
use rayon::prelude::*;

use crate::config::{CutoffSpec, Experiment, ExperimentConfig};
use crate::report::{Outcome, Table};
use crate::row;

/// Run one concrete experiment (not `all`).
pub fn run_experiment(experiment: Experiment, cfg: &ExperimentConfig) -> Outcome {
    let mut out = Outcome::new(experiment);
    let r = match experiment {
        Experiment::ExitTime => exit_time(cfg, &mut out),
        Experiment::VelocityLemma => velocity_lemma(cfg, &mut out),
        Experiment::Cycle => cycle(cfg, &mut out),
        Experiment::JacobianScan => jacobian_scan(cfg, &mut out),
        Experiment::NonlocalScan => nonlocal_scan(cfg, &mut out),
        Experiment::CollisionCheck => collision_check(cfg, &mut out),
        Experiment::DiffuseW1p => diffuse_w1p(cfg, &mut out),
        Experiment::BlowupScan => blowup_scan(cfg, &mut out),
        Experiment::All => Err(KinError::ParameterViolation("`all` is expanded by the runner".into())),
    };
    if let Err(e) = r {
        out.error = Some(e.to_string());
    }
    out
}

/// ‖fd − an‖∞ / max(‖an‖∞, 1).
fn rel_err_vec(fd: &Vec3, an: &Vec3) -> f64 {
    (fd - an).amax() / an.amax().max(1.0)
}

fn rel_err_mat(fd: &Mat3, an: &Mat3) -> f64 {
    sup_norm(&(fd - an)) / sup_norm(an).max(1.0)
}

/// Maximum that propagates NaN, so a broken sample fails its check.
fn fmax(xs: impl IntoIterator<Item = f64>) -> f64 {
    xs.into_iter().fold(0.0, |a, b| if a.is_nan() || b.is_nan() { f64::NAN } else { a.max(b) })
}

fn fit_or_nan(f: &Option<ScalingFit>) -> f64 {
    f.map_or(f64::NAN, |f| f.exponent)
}

/// Interior point with ξ ≤ −1e-3 and velocity with |v| ∈ [0.5, 2], redrawn
/// until `accept` holds. Attempts are numbered, so the state depends on the
/// seed and `ids` only.
fn draw_state<F>(domain: &ConvexDomain, seed: u64, ids: &[u64], accept: F) -> Result<(Vec3, Vec3)>
where
    F: Fn(&Vec3, &Vec3) -> bool,
{
    let mut ids = ids.to_vec();
    ids.push(0);
    for attempt in 0..10_000u64 {
        *ids.last_mut().expect("non-empty") = attempt;
        let mut rng = stream(seed, &ids);
        let x = domain.sample_closure(&mut rng);
        let v = domain.random_direction(&mut rng) * (0.5 + 1.5 * rng.random::<f64>());
        if domain.xi(&x) <= -1e-3 && accept(&x, &v) {
            return Ok((x, v));
        }
    }
    Err(KinError::ParameterViolation("no acceptable state in 10^4 attempts".into()))
}

struct ExitRow {
    x: Vec3,
    v: Vec3,
    t_b: f64,
    incidence: f64,
    residual: f64,
    err: [f64; 4],
}

fn exit_time(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<()> {
    let s = &cfg.exit_time;
    let h = s.fd_step;
    let mut table = Table::new(
        "exit_time",
        &[
            "domain", "state", "x1", "x2", "x3", "v1", "v2", "v3", "t_b", "incidence", "xi_residual", "err_dx_tb",
            "err_dv_tb", "err_dx_xb", "err_dv_xb",
        ],
    );
    for (di, spec) in cfg.domains.iter().enumerate() {
        let d = spec.build()?;
        let rows: Vec<ExitRow> = (0..s.states)
            .into_par_iter()
            .map(|i| {
                let (x, v) = draw_state(&d, cfg.seed, &[0x6578, di as u64, i as u64], |x, v| {
                    d.backward_exit_time(x, v).is_ok_and(|e| e.incidence.abs() >= s.min_incidence * v.norm())
                })?;
                let an = d_exit(&d, &x, &v)?;
                let (mut gx, mut gv, mut mx, mut mv) = (Vec3::zeros(), Vec3::zeros(), Mat3::zeros(), Mat3::zeros());
                for j in 0..d.dim() {
                    let e = Vec3::ith(j, h);
                    let (p, m) = (d.backward_exit_time(&(x + e), &v)?, d.backward_exit_time(&(x - e), &v)?);
                    gx[j] = (p.t_b - m.t_b) / (2.0 * h);
                    mx.set_column(j, &((p.x_b - m.x_b) / (2.0 * h)));
                    let (p, m) = (d.backward_exit_time(&x, &(v + e))?, d.backward_exit_time(&x, &(v - e))?);
                    gv[j] = (p.t_b - m.t_b) / (2.0 * h);
                    mv.set_column(j, &((p.x_b - m.x_b) / (2.0 * h)));
                }
                let e = d.backward_exit_time(&x, &v)?;
                Ok(ExitRow {
                    x,
                    v,
                    t_b: e.t_b,
                    incidence: e.incidence.abs() / v.norm(),
                    residual: d.xi(&e.x_b).abs() / d.diameter().powi(2),
                    err: [
                        rel_err_vec(&gx, &an.dx_tb),
                        rel_err_vec(&gv, &an.dv_tb),
                        rel_err_mat(&mx, &an.dx_xb),
                        rel_err_mat(&mv, &an.dv_xb),
                    ],
                })
            })
            .collect::<Result<_>>()?;
        let name = d.name();
        for (i, r) in rows.iter().enumerate() {
            table.push(row![
                name, i, r.x[0], r.x[1], r.x[2], r.v[0], r.v[1], r.v[2], r.t_b, r.incidence, r.residual, r.err[0],
                r.err[1], r.err[2], r.err[3]
            ]);
        }
        out.check_le(format!("{name}/root-residual"), fmax(rows.iter().map(|r| r.residual)), s.residual_tol);
        out.check_le(format!("{name}/derivatives-vs-fd"), fmax(rows.iter().flat_map(|r| r.err)), s.rel_tol);
    }
    out.tables.push(table);
    Ok(())
}

fn velocity_lemma(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<()> {
    let s = &cfg.velocity_lemma;
    let run = VelocityLemmaRunConfig {
        trajectories: s.trajectories,
        speed: s.speed,
        gap: s.gap,
        horizon: s.horizon,
        seed: cfg.seed,
    };
    let mut drift = Table::new("alpha_drift", &["domain", "bc", "trajectory", "alpha0", "bounces", "drift"]);
    let mut certs = Table::new(
        "certificates",
        &["seed", "domain", "bc", "trajectory", "speed", "s1", "s2", "alpha1", "alpha2", "implied_rate", "checked", "pass"],
    );
    let result = (|| {
        for spec in &cfg.domains {
            let d = spec.build()?;
            let name = d.name();
            for bc in s.bcs.iter().map(|b| b.build()) {
                let tag = format!("{name}/{}", bc.name());
                if d.is_quadratic() {
                    let rows = alpha_drift_run(&d, bc, &run)?;
                    for r in &rows {
                        drift.push(row![name, bc.name(), r.trajectory, r.alpha0, r.bounces, r.drift]);
                    }
                    out.check_le(format!("{tag}/alpha-drift"), fmax(rows.iter().map(|r| r.drift)), s.invariance_tol);
                }
                let rows = velocity_lemma_run(&d, bc, &run)?;
                for r in &rows {
                    certs.push(row![
                        cfg.seed, name, bc.name(), r.trajectory, r.speed, r.s1, r.s2, r.alpha1, r.alpha2, r.implied_rate,
                        r.checked, r.pass
                    ]);
                }
                let checked: Vec<_> = rows.iter().filter(|r| r.checked).collect();
                let failures = checked.iter().filter(|r| !r.pass).count();
                let max_rate = fmax(checked.iter().map(|r| r.implied_rate));
                out.fit(format!("{tag}/checked"), checked.len() as f64);
                out.fit(format!("{tag}/max_implied_rate"), max_rate);
                out.fit(format!("{tag}/constant"), velocity_lemma_constant(&d));
                out.check_le(format!("{tag}/certificate-failures"), failures as f64, 0.0);
            }
        }
        Ok(())
    })();
    out.tables.push(drift);
    out.tables.push(certs);
    result
}

fn cycle(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<()> {
    disk_cycles(cfg, out)?;
    bounce_back_derivatives(cfg, out)
}

fn disk_cycles(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<()> {
    let s = &cfg.cycle;
    let disk = ConvexDomain::disk2d(1.0)?;
    let cap = s.bounces + 10;
    let results: Vec<(PhaseState, f64, kincycle_core::Cycle, f64)> = (0..s.disk_states)
        .into_par_iter()
        .map(|i| {
            let (x, v) = draw_state(&disk, cfg.seed, &[0x6379, i as u64], |x, _| x.norm() > 0.05)?;
            let st = PhaseState::new(0.0, x, v);
            let dc = DiskCycle::new(&disk, &st)?;
            // Stop halfway through the segment after bounce `bounces`.
            let s_min = st.t + dc.bounce(s.bounces).dt.re - 0.5 * dc.gap();
            let closed = disk_specular_cycle(&disk, &st, s_min, cap)?;
            let iterated = build_cycle(&disk, BoundaryCondition::Specular, &st, s_min, cap)?;
            let mut err = max_disk_cycle_discrepancy(&closed, &iterated);
            if closed.bounces() != s.bounces {
                err = f64::INFINITY;
            }
            Ok((st, dc.gap(), closed, err))
        })
        .collect::<Result<_>>()?;
    let mut table = Table::new("disk_cycles", &["state", "x1", "x2", "v1", "v2", "gap", "bounces", "discrepancy"]);
    let mut dump = Table::new("disk_cycle_dump", &["state", "ell", "t", "x1", "x2", "v1", "v2", "r"]);
    for (i, (st, gap, c, err)) in results.iter().enumerate() {
        table.push(row![i, st.x[0], st.x[1], st.v[0], st.v[1], gap, c.bounces(), err]);
        if i < s.dump {
            for (l, e) in c.entries.iter().enumerate() {
                dump.push(row![i, l, e.t, e.x[0], e.x[1], e.v[0], e.v[1], e.r]);
            }
        }
    }
    out.check_le("disk2d(1)/closed-form-vs-iterated", fmax(results.iter().map(|r| r.3)), s.disk_tol);
    out.tables.push(table);
    out.tables.push(dump);
    Ok(())
}

/// Central differences of (tℓ, xℓ) for ℓ = 1..=n.
fn fd_bounce_back(domain: &ConvexDomain, st: &PhaseState, s_min: f64, n: usize, h: f64) -> Result<Vec<[Mat3; 2]>> {
    let entries = |x: Vec3, v: Vec3| -> Result<Vec<(f64, Vec3)>> {
        let c = build_cycle(domain, BoundaryCondition::BounceBack, &PhaseState::new(st.t, x, v), s_min, DEFAULT_BOUNCE_CAP)?;
        if c.bounces() != n {
            return Err(KinError::SegmentCrossing);
        }
        Ok(c.entries[1..].iter().map(|e| (e.t, e.x)).collect())
    };
    // For bounce ℓ = l + 1, out[2l][k] holds ∇tℓ in row 0 and out[2l + 1][k]
    // holds the Jacobian of xℓ; k = 0 differentiates in x, k = 1 in v.
    let mut out = vec![[Mat3::zeros(), Mat3::zeros()]; 2 * n];
    for j in 0..domain.dim() {
        let e = Vec3::ith(j, h);
        for (k, (p, m)) in [(st.x + e, st.x - e), (st.x, st.x)].into_iter().enumerate() {
            let (vp, vm) = if k == 0 { (st.v, st.v) } else { (st.v + e, st.v - e) };
            let (ep, em) = (entries(p, vp)?, entries(m, vm)?);
            for l in 0..n {
                let dt = (ep[l].0 - em[l].0) / (2.0 * h);
                let dx = (ep[l].1 - em[l].1) / (2.0 * h);
                out[2 * l][k][(0, j)] = dt;
                out[2 * l + 1][k].set_column(j, &dx);
            }
        }
    }
    Ok(out)
}

fn bounce_back_derivatives(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<()> {
    let s = &cfg.cycle;
    let n = s.bb_bounces;
    let mut table = Table::new(
        "bounce_back_derivatives",
        &["domain", "state", "ell", "t_ell", "err_dx_t", "err_dv_t", "err_dx_x", "err_dv_x"],
    );
    let result = (|| {
        for (di, spec) in cfg.domains.iter().enumerate() {
            let d = spec.build()?;
            let non_grazing = |x: &Vec3, v: &Vec3| -> bool {
                let Ok(e1) = d.backward_exit_time(x, v) else { return false };
                let Ok(e2) = d.backward_exit_time(&e1.x_b, &(-v)) else { return false };
                let floor = s.min_incidence * v.norm();
                e1.incidence.abs() >= floor && e2.incidence.abs() >= floor
            };
            let rows: Vec<Vec<(f64, [f64; 4])>> = (0..s.bb_states)
                .into_par_iter()
                .map(|i| {
                    let (x, v) = draw_state(&d, cfg.seed, &[0x6262, di as u64, i as u64], non_grazing)?;
                    let st = PhaseState::new(0.0, x, d.planar(&v));
                    let an: Vec<_> =
                        (1..=n + 1).map(|l| bounce_back_cycle_derivatives(&d, &st, l)).collect::<Result<_>>()?;
                    let s_min = 0.5 * (an[n - 1].t + an[n].t);
                    let fd = fd_bounce_back(&d, &st, s_min, n, s.fd_step)?;
                    Ok((0..n)
                        .map(|l| {
                            let a = &an[l];
                            let (ft, fx) = (&fd[2 * l], &fd[2 * l + 1]);
                            let row0 = |m: &Mat3| Vec3::new(m[(0, 0)], m[(0, 1)], m[(0, 2)]);
                            (
                                a.t,
                                [
                                    rel_err_vec(&row0(&ft[0]), &a.dx_t),
                                    rel_err_vec(&row0(&ft[1]), &a.dv_t),
                                    rel_err_mat(&fx[0], &a.dx_x),
                                    rel_err_mat(&fx[1], &a.dv_x),
                                ],
                            )
                        })
                        .collect())
                })
                .collect::<Result<_>>()?;
            let name = d.name();
            for (i, r) in rows.iter().enumerate() {
                for (l, (t, e)) in r.iter().enumerate() {
                    table.push(row![name, i, l + 1, t, e[0], e[1], e[2], e[3]]);
                }
            }
            let worst = fmax(rows.iter().flatten().flat_map(|r| r.1));
            out.check_le(format!("{name}/bounce-back-derivatives-vs-fd"), worst, s.rel_tol);
        }
        Ok(())
    })();
    out.tables.push(table);
    result
}

fn jacobian_scan(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<()> {
    let s = &cfg.jacobian_scan;
    let sphere = ConvexDomain::sphere(1.0)?;
    let scan_cfg = JacobianScanConfig {
        alphas: log_space(s.alpha_min, s.alpha_max, s.points),
        speed: s.speed,
        t_minus_s: s.t_minus_s,
        phase: s.phase,
        step: FdStep::Auto { rel: s.fd_rel },
    };
    let scan = scaling_exponents(&sphere, BoundaryCondition::Specular, &scan_cfg)?;
    let mut table = Table::new("sphere_jacobian", &["alpha", "sup_dx_x", "sup_dv_x", "sup_dx_v", "sup_dv_v", "h_used"]);
    for r in &scan.rows {
        table.push(row![r.alpha, r.sup_dx_x, r.sup_dv_x, r.sup_dx_v, r.sup_dv_v, r.h_used]);
    }
    out.tables.push(table);
    out.fit("sphere/skipped", scan.skipped as f64);
    // Blocks are named d<wrt>_<quantity>: dx_v is ∂ₓV.
    for (key, fit, target) in [
        ("dx_X", &scan.dx_x, -0.5),
        ("dv_V", &scan.dv_v, -0.5),
        ("dx_V", &scan.dx_v, -1.0),
        ("dv_X", &scan.dv_x, 0.0),
    ] {
        let e = fit_or_nan(fit);
        out.fit(format!("sphere/{key}/exponent"), e);
        out.fit(format!("sphere/{key}/r2"), fit.map_or(f64::NAN, |f| f.r2));
        out.check_near(format!("sphere/{key}/exponent"), e, target, s.slope_tol);
    }

    let disk = ConvexDomain::disk2d(1.0)?;
    let alphas = log_space(s.disk_alpha_min, s.disk_alpha_max, s.disk_points);
    let rows: Vec<_> = alphas
        .par_iter()
        .map(|&a| {
            let (st, t) = disk_grazing_state(a, s.disk_theta0, s.disk_t_minus_s, s.disk_t_minus_s, s.phase)?;
            disk_normal_derivatives(&disk, &st, t)
        })
        .collect::<Result<_>>()?;
    let mut table = Table::new("disk_normal", &["alpha", "ell", "dn_x_normal", "dn_x_tangential", "dn_v_normal"]);
    for r in &rows {
        table.push(row![r.alpha, r.ell, r.dn_x_normal, r.dn_x_tangential, r.dn_v_normal]);
    }
    out.tables.push(table);
    let al: Vec<f64> = rows.iter().map(|r| r.alpha).collect();
    let qx: Vec<f64> = rows.iter().map(|r| r.dn_x_normal).collect();
    let qv: Vec<f64> = rows.iter().map(|r| r.dn_v_normal).collect();
    for (key, q, target) in [("dn_X_normal", qx, -0.5), ("dn_V_normal", qv, -1.0)] {
        let e = fit_or_nan(&scaling_fit(&al, &q));
        out.fit(format!("disk2d(1)/{key}/exponent"), e);
        out.check_near(format!("disk2d(1)/{key}/exponent"), e, target, s.disk_slope_tol);
    }
    Ok(())
}

fn nonlocal_scan(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<()> {
    let s = &cfg.nonlocal_scan;
    let sphere = ConvexDomain::sphere(1.0)?;
    let xis = log_space(s.xi_min, s.xi_max, s.xi_points);
    let dyn_cfg = DynamicalScanConfig {
        alphas: log_space(s.alpha_min, s.alpha_max, s.alpha_points),
        speed: s.speed,
        t: s.t,
        phase: s.phase,
    };
    let l = s.l_factor * (1.0 + s.speed * s.speed).sqrt();
    let scans: Vec<_> = s
        .betas
        .par_iter()
        .map(|&beta| {
            let params = NonlocalParams { beta, l, ..NonlocalParams::default() };
            let u = u_integral_scan(&sphere, &xis, s.speed, &params)?;
            let traj = dynamical_scan(&sphere, BoundaryCondition::Specular, &params, &dyn_cfg, SpeedFactor::One)?;
            Ok((u, traj))
        })
        .collect::<Result<_>>()?;
    let mut ut = Table::new("u_integral", &["beta", "xi", "value", "ratio"]);
    let mut tt = Table::new("trajectory", &["beta", "l", "alpha", "lhs", "rhs_scale", "ratio", "segments"]);
    for (u, traj) in &scans {
        for k in 0..u.xis.len() {
            ut.push(row![u.beta, u.xis[k], u.values[k], u.ratios[k]]);
        }
        for r in &traj.rows {
            tt.push(row![traj.beta, traj.l, r.alpha, r.lhs, r.rhs_scale, r.ratio, r.segments]);
        }
        let tag = format!("beta={}", u.beta);
        let max_ratio = fmax(traj.rows.iter().map(|r| r.ratio));
        out.fit(format!("{tag}/u_slope"), u.slope);
        out.fit(format!("{tag}/u_spread"), u.spread);
        out.fit(format!("{tag}/trajectory_slope"), traj.slope);
        out.fit(format!("{tag}/trajectory_spread"), traj.spread);
        out.fit(format!("{tag}/max_ratio"), max_ratio);
        out.check_near(format!("{tag}/u-slope"), u.slope, -(u.beta - 0.5), s.u_slope_tol);
        out.check_le(format!("{tag}/trajectory-spread"), traj.spread, s.spread_max);
        out.check_le(format!("{tag}/trajectory-ratio-bound"), max_ratio, s.ratio_bound);
    }
    out.tables.push(ut);
    out.tables.push(tt);
    Ok(())
}

fn sqrt_mu(u: &Vec3) -> f64 {
    (-0.25 * u.norm_squared()).exp()
}

fn collision_check(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<()> {
    let s = &cfg.collision_check;
    let cutoff = match s.cutoff {
        CutoffSpec::AbsCos => AngularCutoff::AbsCos,
        CutoffSpec::One => AngularCutoff::One,
    };
    let params = CollisionParams::new(s.kappa, cutoff)?;
    let flat = CollisionParams::new(0.0, AngularCutoff::One)?;
    let quad = QuadConfig::default();

    let mut eq = Table::new("equilibrium", &["case", "v1", "v2", "v3", "gain", "stderr", "reference", "z"]);
    let mut worst_nu: f64 = 0.0;
    for (k, v) in s.velocities.iter().map(|v| Vec3::from(*v)).enumerate() {
        // Γ_gain(√μ, √μ) = ν(√μ)√μ: the linearised operator annihilates √μ.
        let gain = gamma_gain(&sqrt_mu, &sqrt_mu, &v, &params, &McConfig::new(s.samples, cfg.seed, k as u64))?;
        let loss = nu_loss(&sqrt_mu, &v, &params, &quad)? * sqrt_mu(&v);
        let z = gain.z_score(loss);
        eq.push(row!["annihilation", v[0], v[1], v[2], gain.mean, gain.stderr, loss, z]);
        out.check_le(format!("annihilation/v{k}"), z, s.z_max);
        // κ = 0, q₀ ≡ 1: both sides equal 4π(2π)^{3/2}e^{−|v|²/4}.
        let closed = equilibrium_gain_closed_form(&v);
        let gain = gamma_gain(&sqrt_mu, &sqrt_mu, &v, &flat, &McConfig::new(s.samples, cfg.seed, 100 + k as u64))?;
        let z = gain.z_score(closed);
        eq.push(row!["closed-form", v[0], v[1], v[2], gain.mean, gain.stderr, closed, z]);
        out.check_le(format!("closed-form-gain/v{k}"), z, s.z_max);
        let nu = nu_loss(&sqrt_mu, &v, &flat, &quad)? * sqrt_mu(&v);
        worst_nu = worst_nu.max((nu / closed - 1.0).abs());
    }
    out.tables.push(eq);
    out.check_le("closed-form-nu-quadrature", worst_nu, s.nu_rel_tol);

    let mut mt = Table::new("moments", &["moment", "mean", "stderr", "z"]);
    for (k, psi) in Moment::ALL.iter().enumerate() {
        let est = collision_moment(&perturbed_maxwellian, *psi, &params, &McConfig::new(s.samples, cfg.seed, 200 + k as u64))?;
        let z = est.z_score(0.0);
        mt.push(row![psi.name(), est.mean, est.stderr, z]);
        out.check_le(format!("moment/{}", psi.name()), z, s.z_max);
    }
    out.tables.push(mt);

    let kb = KernelBound { kappa: s.kappa, ..KernelBound::default() };
    let ks: Vec<_> = s
        .kernel_speeds
        .par_iter()
        .map(|&sp| kernel_integral_check(&Vec3::new(0.0, 0.0, sp), &kb, s.kernel_theta))
        .collect::<Result<_>>()?;
    let mut kt = Table::new("kernel", &["speed", "integral", "bracket_product"]);
    for (sp, k) in s.kernel_speeds.iter().zip(&ks) {
        kt.push(row![sp, k.integral, k.product_with_bracket_v]);
    }
    out.tables.push(kt);
    let prods: Vec<f64> = ks.iter().map(|k| k.product_with_bracket_v).collect();
    let lo = prods.iter().cloned().fold(f64::INFINITY, f64::min);
    let factor = fmax(prods.iter().cloned()) / lo;
    out.fit("kernel/max_over_min", factor);
    out.check_le("kernel-bracket-product-factor", factor, s.kernel_factor);
    Ok(())
}

fn diffuse_w1p(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<()> {
    let s = &cfg.diffuse_w1p;
    let problem = TransportProblem::new(
        ConvexDomain::sphere(1.0)?,
        BoundaryCondition::diffuse(cfg.seed),
        Arc::new(RadialBump),
        Representation::RatioOverSqrtMu,
    );
    let bcfg = BoundaryScanConfig { outer: s.outer, inner: s.inner, seed: cfg.seed, v_max: s.v_max, rel_step: s.rel_step };
    let scans = boundary_lp_scan(&problem, &[s.p_divergent, s.p_convergent], s.t_max, &s.deltas, &bcfg)?;
    let mut table = Table::new("boundary_integral", &["p", "delta", "log_inv_delta", "value", "stderr"]);
    for sc in &scans {
        for r in &sc.rows {
            table.push(row![sc.p, r.delta, (1.0 / r.delta).ln(), r.value, r.stderr]);
        }
        out.fit(format!("p={}/log_slope", sc.p), sc.log_slope.mean);
        out.fit(format!("p={}/log_slope_stderr", sc.p), sc.log_slope.stderr);
    }
    out.tables.push(table);
    let div = &scans[0];
    out.check_ge(format!("p={}/log-slope-z", div.p), div.log_slope.mean / div.log_slope.stderr, s.slope_z);
    let conv = &scans[1];
    let last = s.deltas.len() - 1;
    let earlier = last - s.cauchy_lag;
    let diff = conv.difference(last, earlier);
    let bound = s.cauchy_z * diff.stderr + s.cauchy_rel * conv.rows[earlier].value.abs();
    out.fit(format!("p={}/cauchy_difference", conv.p), diff.mean);
    out.fit(format!("p={}/cauchy_difference_stderr", conv.p), diff.stderr);
    out.check_le(format!("p={}/cauchy", conv.p), diff.mean.abs(), bound);
    Ok(())
}

fn blowup_scan(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<()> {
    let s = &cfg.blowup_scan;
    let disk = ConvexDomain::disk2d(1.0)?;
    let scan_cfg = BlowupScanConfig {
        alphas: log_space(s.alpha_min, s.alpha_max, s.points),
        t: s.t,
        phase: s.phase,
        theta0: s.theta0,
    };
    let mut table = Table::new("blowup", &["datum", "alpha", "t", "dn_f"]);
    let cases: [(&str, Arc<dyn PhaseFunction>, f64); 2] = [
        ("v-dependent", Arc::new(TrigDatum { centre: Some(Vec3::from(s.centre)) }), s.v_dependent_exponent),
        ("v-independent", Arc::new(TrigDatum { centre: None }), s.v_independent_exponent),
    ];
    let result = (|| {
        for (label, datum, target) in cases {
            let problem = TransportProblem::new(disk.clone(), BoundaryCondition::Specular, datum, Representation::DensityF);
            let scan = grazing_blowup_scan(&problem, &scan_cfg)?;
            for r in &scan.rows {
                table.push(row![label, r.alpha, r.t, r.dn_f]);
            }
            let e = fit_or_nan(&scan.fit);
            out.fit(format!("{label}/exponent"), e);
            out.fit(format!("{label}/r2"), scan.fit.map_or(f64::NAN, |f| f.r2));
            out.check_near(format!("{label}/exponent"), e, target, s.tol);
        }
        Ok(())
    })();
    out.tables.push(table);
    result
}
