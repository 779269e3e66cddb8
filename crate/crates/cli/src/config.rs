//! Experiment configuration: a TOML file with one table per experiment,
//! layered over built-in defaults and overridden by flags and environment.
//!
//! Resolution order, lowest first: full or quick defaults, the config file,
//! then `--seed`, `--domain`, `--quick` and the experiment argument. The
//! resolved config is echoed into the report as canonical TOML together with
//! its SHA-256.

use std::fmt;
use std::str::FromStr;

use clap::ValueEnum;
use kincycle_core::collision::{AngularCutoff, CollisionParams, KERNEL_SCAN_SPEEDS};
use kincycle_core::constants::NONLOCAL_RATIO_BOUND;
use kincycle_core::{BoundaryCondition, ConvexDomain};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid value for `{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.into(), message: message.into() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
#[value(rename_all = "kebab-case")]
pub enum Experiment {
    ExitTime,
    VelocityLemma,
    Cycle,
    JacobianScan,
    NonlocalScan,
    CollisionCheck,
    DiffuseW1p,
    BlowupScan,
    All,
}

impl Experiment {
    /// Every concrete experiment, in the order `all` runs them.
    pub const EACH: [Experiment; 8] = [
        Self::ExitTime,
        Self::VelocityLemma,
        Self::Cycle,
        Self::JacobianScan,
        Self::NonlocalScan,
        Self::CollisionCheck,
        Self::DiffuseW1p,
        Self::BlowupScan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::ExitTime => "exit-time",
            Self::VelocityLemma => "velocity-lemma",
            Self::Cycle => "cycle",
            Self::JacobianScan => "jacobian-scan",
            Self::NonlocalScan => "nonlocal-scan",
            Self::CollisionCheck => "collision-check",
            Self::DiffuseW1p => "diffuse-w1p",
            Self::BlowupScan => "blowup-scan",
            Self::All => "all",
        }
    }

    pub fn expand(self) -> Vec<Experiment> {
        match self {
            Self::All => Self::EACH.to_vec(),
            e => vec![e],
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A builtin domain written as `sphere(r)`, `ellipsoid(a,b,c)`, `disk2d(r)`
/// or `quartic(λ)`. Bare names mean sphere(1), ellipsoid(2,1,1), disk2d(1)
/// and quartic(0.1); `disk` is accepted for `disk2d`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DomainSpec {
    Sphere(f64),
    Ellipsoid(f64, f64, f64),
    Disk(f64),
    Quartic(f64),
}

impl DomainSpec {
    pub fn build(&self) -> kincycle_core::Result<ConvexDomain> {
        match *self {
            Self::Sphere(r) => ConvexDomain::sphere(r),
            Self::Ellipsoid(a, b, c) => ConvexDomain::ellipsoid(a, b, c),
            Self::Disk(r) => ConvexDomain::disk2d(r),
            Self::Quartic(l) => ConvexDomain::quartic_ball(l),
        }
    }
}

impl fmt::Display for DomainSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Sphere(r) => write!(f, "sphere({r})"),
            Self::Ellipsoid(a, b, c) => write!(f, "ellipsoid({a},{b},{c})"),
            Self::Disk(r) => write!(f, "disk2d({r})"),
            Self::Quartic(l) => write!(f, "quartic({l})"),
        }
    }
}

impl FromStr for DomainSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let (name, args) = match s.find('(') {
            Some(i) if s.ends_with(')') => (&s[..i], Some(&s[i + 1..s.len() - 1])),
            Some(_) => return Err(format!("unbalanced parentheses in domain `{s}`")),
            None => (s, None),
        };
        let nums: Vec<f64> = match args {
            Some(a) => a
                .split(',')
                .map(|x| x.trim().parse::<f64>().map_err(|e| format!("bad number `{}` in `{s}`: {e}", x.trim())))
                .collect::<Result<_, _>>()?,
            None => vec![],
        };
        let arity = |n: usize| -> Result<(), String> {
            if nums.len() == n {
                Ok(())
            } else {
                Err(format!("`{name}` takes {n} parameter(s), got {}", nums.len()))
            }
        };
        let spec = match (name.trim(), args.is_some()) {
            ("sphere", false) => Self::Sphere(1.0),
            ("ellipsoid", false) => Self::Ellipsoid(2.0, 1.0, 1.0),
            ("disk" | "disk2d", false) => Self::Disk(1.0),
            ("quartic", false) => Self::Quartic(0.1),
            ("sphere", true) => {
                arity(1)?;
                Self::Sphere(nums[0])
            }
            ("ellipsoid", true) => {
                arity(3)?;
                Self::Ellipsoid(nums[0], nums[1], nums[2])
            }
            ("disk" | "disk2d", true) => {
                arity(1)?;
                Self::Disk(nums[0])
            }
            ("quartic", true) => {
                arity(1)?;
                Self::Quartic(nums[0])
            }
            (other, _) => {
                return Err(format!("unknown domain `{other}` (expected sphere, ellipsoid, disk2d or quartic)"))
            }
        };
        spec.build().map_err(|e| format!("{s}: {e}"))?;
        Ok(spec)
    }
}

impl TryFrom<String> for DomainSpec {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<DomainSpec> for String {
    fn from(d: DomainSpec) -> String {
        d.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BcSpec {
    Specular,
    BounceBack,
}

impl BcSpec {
    pub fn build(self) -> BoundaryCondition {
        match self {
            Self::Specular => BoundaryCondition::Specular,
            Self::BounceBack => BoundaryCondition::BounceBack,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CutoffSpec {
    AbsCos,
    One,
}

/// Backward exit times: root residual and analytic derivatives against
/// central differences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExitTimeSection {
    /// Non-grazing states per domain.
    pub states: usize,
    /// States need |n(x_b)·v|/|v| at least this.
    pub min_incidence: f64,
    pub fd_step: f64,
    /// Bound on ‖FD − analytic‖∞ / max(‖analytic‖∞, 1) per block.
    pub rel_tol: f64,
    /// Bound on |ξ(x_b)| / diameter².
    pub residual_tol: f64,
}

impl Default for ExitTimeSection {
    fn default() -> Self {
        Self { states: 1000, min_incidence: 0.05, fd_step: 1e-6, rel_tol: 1e-4, residual_tol: 1e-12 }
    }
}

/// α drift on quadratic domains and Velocity-Lemma certificates on the rest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VelocityLemmaSection {
    pub bcs: Vec<BcSpec>,
    /// Random trajectories per domain and boundary condition.
    pub trajectories: usize,
    pub speed: f64,
    /// s₁ − s₂.
    pub gap: f64,
    /// Trajectories start at t = horizon and run back to 0.
    pub horizon: f64,
    /// Bound on the relative α drift for quadratic domains.
    pub invariance_tol: f64,
}

impl Default for VelocityLemmaSection {
    fn default() -> Self {
        Self {
            bcs: vec![BcSpec::Specular, BcSpec::BounceBack],
            trajectories: 10_000,
            speed: 1.0,
            gap: 0.5,
            horizon: 5.0,
            invariance_tol: 1e-9,
        }
    }
}

/// Closed-form disk cycles and bounce-back cycle derivatives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CycleSection {
    pub disk_states: usize,
    pub bounces: usize,
    /// Bound on the largest |Δt|, |Δx|, |Δv| between the two cycles.
    pub disk_tol: f64,
    /// Non-grazing states per domain for the bounce-back derivatives.
    pub bb_states: usize,
    /// Bounces ℓ = 1..=bb_bounces are differentiated.
    pub bb_bounces: usize,
    pub min_incidence: f64,
    pub fd_step: f64,
    pub rel_tol: f64,
    /// Disk cycles written out in full.
    pub dump: usize,
}

impl Default for CycleSection {
    fn default() -> Self {
        Self {
            disk_states: 1000,
            bounces: 100,
            disk_tol: 1e-8,
            bb_states: 1000,
            bb_bounces: 3,
            min_incidence: 0.05,
            fd_step: 1e-6,
            rel_tol: 1e-4,
            dump: 5,
        }
    }
}

/// Grazing Jacobian scan on the unit sphere and normal derivatives on the
/// unit disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JacobianScanSection {
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub points: usize,
    pub speed: f64,
    pub t_minus_s: f64,
    pub phase: f64,
    /// Relative finite-difference step, scaled to the grazing geometry.
    pub fd_rel: f64,
    pub slope_tol: f64,
    pub disk_alpha_min: f64,
    pub disk_alpha_max: f64,
    pub disk_points: usize,
    pub disk_t_minus_s: f64,
    pub disk_theta0: f64,
    pub disk_slope_tol: f64,
}

impl Default for JacobianScanSection {
    fn default() -> Self {
        Self {
            alpha_min: 1e-6,
            alpha_max: 1e-1,
            points: 11,
            speed: 1.0,
            t_minus_s: 3.0,
            phase: 0.25,
            fd_rel: 1e-3,
            slope_tol: 0.15,
            disk_alpha_min: 1e-6,
            disk_alpha_max: 1e-2,
            disk_points: 9,
            disk_t_minus_s: 2.0,
            disk_theta0: 0.0,
            disk_slope_tol: 0.1,
        }
    }
}

/// u-integral and trajectory integral of α^{-β} on the unit sphere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NonlocalScanSection {
    pub betas: Vec<f64>,
    pub xi_min: f64,
    pub xi_max: f64,
    pub xi_points: usize,
    pub speed: f64,
    pub u_slope_tol: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub alpha_points: usize,
    /// Time cut-off l = l_factor·⟨v⟩.
    pub l_factor: f64,
    pub t: f64,
    pub phase: f64,
    /// Bound on max/min of the normalised trajectory integral.
    pub spread_max: f64,
    /// Frozen bound on the normalised trajectory integral.
    pub ratio_bound: f64,
}

impl Default for NonlocalScanSection {
    fn default() -> Self {
        Self {
            betas: vec![0.75, 1.0, 1.25],
            xi_min: 1e-6,
            xi_max: 1e-1,
            xi_points: 6,
            speed: 1.0,
            u_slope_tol: 0.05,
            alpha_min: 1e-6,
            alpha_max: 1e-2,
            alpha_points: 9,
            l_factor: 10.0,
            t: 1.0,
            phase: 0.25,
            spread_max: 20.0,
            ratio_bound: NONLOCAL_RATIO_BOUND,
        }
    }
}

/// Monte-Carlo checks of the collision operator and the kernel envelope.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollisionCheckSection {
    pub samples: usize,
    pub kappa: f64,
    pub cutoff: CutoffSpec,
    /// Velocities at which gain and loss are compared.
    pub velocities: Vec<[f64; 3]>,
    pub z_max: f64,
    /// Tolerance of the ν quadrature against its closed form.
    pub nu_rel_tol: f64,
    pub kernel_theta: f64,
    pub kernel_speeds: Vec<f64>,
    /// Bound on max/min of ⟨v⟩I(v) over the speeds.
    pub kernel_factor: f64,
}

impl Default for CollisionCheckSection {
    fn default() -> Self {
        let p = CollisionParams::default();
        Self {
            samples: 1_000_000,
            kappa: p.kappa,
            cutoff: match p.q0 {
                AngularCutoff::AbsCos => CutoffSpec::AbsCos,
                AngularCutoff::One => CutoffSpec::One,
            },
            velocities: vec![[0.0, 0.0, 0.0], [1.5, 0.0, -1.0], [0.0, 3.0, 0.0]],
            z_max: 3.0,
            nu_rel_tol: 1e-6,
            kernel_theta: 0.0,
            kernel_speeds: KERNEL_SCAN_SPEEDS.to_vec(),
            kernel_factor: 10.0,
        }
    }
}

/// Boundary integral of |∇ₓf|ᵖ for diffuse free transport of the radial
/// bump on the unit sphere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffuseW1pSection {
    /// Boundary phase points.
    pub outer: usize,
    /// Diffuse cycles per stencil point (even).
    pub inner: usize,
    pub t_max: f64,
    /// Truncation levels, decreasing.
    pub deltas: Vec<f64>,
    /// Exponent whose integral must grow like log(1/δ).
    pub p_divergent: f64,
    /// Exponent whose integral must converge.
    pub p_convergent: f64,
    pub v_max: f64,
    pub rel_step: f64,
    /// Required slope / stderr for the divergent exponent.
    pub slope_z: f64,
    /// The convergent integral compares the last δ with the one this many
    /// steps earlier.
    pub cauchy_lag: usize,
    pub cauchy_z: f64,
    pub cauchy_rel: f64,
}

impl Default for DiffuseW1pSection {
    fn default() -> Self {
        Self {
            outer: 31_250,
            inner: 32,
            t_max: 1.0,
            deltas: (3..=9).map(|k| 0.5f64.powi(k)).collect(),
            p_divergent: 2.0,
            p_convergent: 1.5,
            v_max: 6.0,
            rel_step: 1e-3,
            slope_z: 3.0,
            cauchy_lag: 2,
            cauchy_z: 3.0,
            cauchy_rel: 0.05,
        }
    }
}

/// ∂ₙf along a grazing approach for specular transport on the unit disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlowupScanSection {
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub points: usize,
    pub t: f64,
    pub phase: f64,
    pub theta0: f64,
    /// Velocity centre w of the v-dependent datum sin(3x₁)cos(2x₂)e^{−|v−w|²}.
    pub centre: [f64; 3],
    pub v_dependent_exponent: f64,
    pub v_independent_exponent: f64,
    pub tol: f64,
}

impl Default for BlowupScanSection {
    fn default() -> Self {
        Self {
            alpha_min: 1e-6,
            alpha_max: 1e-2,
            points: 9,
            t: 2.0,
            phase: 0.25,
            theta0: 0.0,
            centre: [0.5, 0.0, 0.0],
            v_dependent_exponent: -1.0,
            v_independent_exponent: -0.5,
            tol: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seed: u64,
    /// Reduced sample counts and grids; selects the quick defaults.
    pub quick: bool,
    /// Domains of the exit-time, velocity-lemma and bounce-back checks.
    pub domains: Vec<DomainSpec>,
    pub exit_time: ExitTimeSection,
    pub velocity_lemma: VelocityLemmaSection,
    pub cycle: CycleSection,
    pub jacobian_scan: JacobianScanSection,
    pub nonlocal_scan: NonlocalScanSection,
    pub collision_check: CollisionCheckSection,
    pub diffuse_w1p: DiffuseW1pSection,
    pub blowup_scan: BlowupScanSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: Experiment::All,
            seed: 0,
            quick: false,
            domains: vec![
                DomainSpec::Sphere(1.0),
                DomainSpec::Ellipsoid(2.0, 1.0, 1.0),
                DomainSpec::Disk(1.0),
                DomainSpec::Quartic(0.1),
            ],
            exit_time: Default::default(),
            velocity_lemma: Default::default(),
            cycle: Default::default(),
            jacobian_scan: Default::default(),
            nonlocal_scan: Default::default(),
            collision_check: Default::default(),
            diffuse_w1p: Default::default(),
            blowup_scan: Default::default(),
        }
    }
}

impl ExperimentConfig {
    /// Defaults of quick runs: smaller samples and a shorter trajectory
    /// scan. The exponent scans cost milliseconds and keep their full grids.
    pub fn quick() -> Self {
        let mut c = Self { quick: true, ..Self::default() };
        c.exit_time.states = 200;
        c.velocity_lemma.trajectories = 1000;
        c.cycle.disk_states = 100;
        c.cycle.bb_states = 100;
        c.nonlocal_scan.alpha_min = 1e-4;
        c.nonlocal_scan.alpha_points = 3;
        c.collision_check.samples = 100_000;
        c.diffuse_w1p.outer = 2000;
        c
    }

    pub fn defaults(quick: bool) -> Self {
        if quick {
            Self::quick()
        } else {
            Self::default()
        }
    }

    /// Canonical TOML text of the config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }

    /// SHA-256 of [`Self::to_toml`], hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Semantic checks that the type system does not cover.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = |key: &str, x: f64| if x > 0.0 && x.is_finite() { Ok(()) } else { Err(invalid(key, format!("{x} must be positive"))) };
        let at_least = |key: &str, n: usize, min: usize| {
            if n >= min {
                Ok(())
            } else {
                Err(invalid(key, format!("{n} is below the minimum {min}")))
            }
        };
        let range = |key: &str, lo: f64, hi: f64| {
            if lo > 0.0 && hi > lo {
                Ok(())
            } else {
                Err(invalid(key, format!("need 0 < min < max, got [{lo}, {hi}]")))
            }
        };
        if self.domains.is_empty() {
            return Err(invalid("domains", "at least one domain is required"));
        }
        let e = &self.exit_time;
        at_least("exit_time.states", e.states, 1)?;
        positive("exit_time.fd_step", e.fd_step)?;
        positive("exit_time.rel_tol", e.rel_tol)?;
        positive("exit_time.residual_tol", e.residual_tol)?;
        let v = &self.velocity_lemma;
        at_least("velocity_lemma.trajectories", v.trajectories, 1)?;
        if v.bcs.is_empty() {
            return Err(invalid("velocity_lemma.bcs", "at least one boundary condition is required"));
        }
        positive("velocity_lemma.speed", v.speed)?;
        positive("velocity_lemma.gap", v.gap)?;
        if v.gap >= v.horizon {
            return Err(invalid("velocity_lemma.gap", format!("{} must be below horizon = {}", v.gap, v.horizon)));
        }
        let c = &self.cycle;
        at_least("cycle.disk_states", c.disk_states, 1)?;
        at_least("cycle.bounces", c.bounces, 1)?;
        at_least("cycle.bb_states", c.bb_states, 1)?;
        at_least("cycle.bb_bounces", c.bb_bounces, 1)?;
        positive("cycle.fd_step", c.fd_step)?;
        let j = &self.jacobian_scan;
        range("jacobian_scan.alpha_min", j.alpha_min, j.alpha_max)?;
        at_least("jacobian_scan.points", j.points, kincycle_core::fit::MIN_FIT_POINTS)?;
        range("jacobian_scan.disk_alpha_min", j.disk_alpha_min, j.disk_alpha_max)?;
        at_least("jacobian_scan.disk_points", j.disk_points, kincycle_core::fit::MIN_FIT_POINTS)?;
        positive("jacobian_scan.speed", j.speed)?;
        positive("jacobian_scan.fd_rel", j.fd_rel)?;
        let n = &self.nonlocal_scan;
        if n.betas.is_empty() || n.betas.iter().any(|b| !(*b > 0.5 && *b < 1.5)) {
            return Err(invalid("nonlocal_scan.betas", "need one or more values in (1/2, 3/2)"));
        }
        range("nonlocal_scan.xi_min", n.xi_min, n.xi_max)?;
        at_least("nonlocal_scan.xi_points", n.xi_points, 2)?;
        range("nonlocal_scan.alpha_min", n.alpha_min, n.alpha_max)?;
        at_least("nonlocal_scan.alpha_points", n.alpha_points, 2)?;
        positive("nonlocal_scan.l_factor", n.l_factor)?;
        let k = &self.collision_check;
        at_least("collision_check.samples", k.samples, 1000)?;
        if !(0.0..=1.0).contains(&k.kappa) {
            return Err(invalid("collision_check.kappa", format!("{} outside [0, 1]", k.kappa)));
        }
        if k.kernel_speeds.is_empty() {
            return Err(invalid("collision_check.kernel_speeds", "at least one speed is required"));
        }
        let d = &self.diffuse_w1p;
        at_least("diffuse_w1p.outer", d.outer, 2)?;
        if d.inner < 2 || !d.inner.is_multiple_of(2) {
            return Err(invalid("diffuse_w1p.inner", format!("{} must be even and at least 2", d.inner)));
        }
        if d.deltas.len() < 2 || d.deltas.windows(2).any(|w| w[1] >= w[0]) || d.deltas.iter().any(|x| *x <= 0.0) {
            return Err(invalid("diffuse_w1p.deltas", "need two or more positive, decreasing values"));
        }
        if d.cauchy_lag == 0 || d.cauchy_lag >= d.deltas.len() {
            return Err(invalid("diffuse_w1p.cauchy_lag", format!("must lie in 1..{}", d.deltas.len())));
        }
        positive("diffuse_w1p.t_max", d.t_max)?;
        let b = &self.blowup_scan;
        range("blowup_scan.alpha_min", b.alpha_min, b.alpha_max)?;
        at_least("blowup_scan.points", b.points, kincycle_core::fit::MIN_FIT_POINTS)?;
        Ok(())
    }
}

/// Values given on the command line or through the environment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub experiment: Option<Experiment>,
    pub seed: Option<u64>,
    pub quick: Option<bool>,
    pub domain: Option<DomainSpec>,
}

/// Merge `over` into `base`, recursing into tables.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Resolve a config from optional file text (with its path for messages)
/// and overrides.
pub fn resolve(file: Option<(&str, &str)>, over: &Overrides) -> Result<ExperimentConfig, ConfigError> {
    let mut file_table = toml::Table::new();
    let mut file_quick = None;
    if let Some((path, text)) = file {
        // Typed parse first: it reports unknown keys and type errors with
        // line and column.
        let typed: ExperimentConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse { path: path.into(), message: e.to_string() })?;
        file_table = toml::from_str(text).map_err(|e| ConfigError::Parse { path: path.into(), message: e.to_string() })?;
        if file_table.contains_key("quick") {
            file_quick = Some(typed.quick);
        }
    }
    let quick = over.quick.or(file_quick).unwrap_or(false);
    let mut table = toml::Table::try_from(ExperimentConfig::defaults(quick)).expect("defaults serialise");
    merge(&mut table, file_table);
    let mut cfg: ExperimentConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Parse { path: "<merged config>".into(), message: e.to_string() })?;
    cfg.quick = quick;
    if let Some(e) = over.experiment {
        cfg.experiment = e;
    }
    if let Some(s) = over.seed {
        cfg.seed = s;
    }
    if let Some(d) = over.domain {
        cfg.domains = vec![d];
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Read and resolve a config file.
pub fn load(path: Option<&std::path::Path>, over: &Overrides) -> Result<ExperimentConfig, ConfigError> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io { path: p.display().to_string(), source })?;
            resolve(Some((&p.display().to_string(), &text)), over)
        }
        None => resolve(None, over),
    }
}
