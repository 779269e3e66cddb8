//! Characteristic cycles, kinetic distance and collision-kernel estimates
//! for kinetic transport in strictly convex domains.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`]: level-set domains, normals, backward exit times.
//! * [`kinetic_distance`]: the kinetic distance α and Velocity-Lemma checks.
//! * [`trajectories`]: specular, bounce-back and diffuse backward cycles,
//!   including the closed-form specular cycle of the unit disk.
//! * [`jacobians`]: analytic and finite-difference derivatives of cycles and
//!   the grazing scaling scans.
//! * [`collision`]: hard-potential gain/loss terms and the kernel envelope.
//! * [`nonlocal`]: velocity and trajectory integrals of α^{-β}.
//! * [`transport`]: free-transport evaluation and sharpness experiments.

pub mod collision;
pub mod constants;
pub mod dual;
pub mod error;
pub mod fit;
pub mod geometry;
pub mod jacobians;
pub mod kinetic_distance;
pub mod nonlocal;
pub mod quadrature;
pub mod rng;
pub mod stats;
pub mod trajectories;
pub mod transport;

pub use error::{KinError, Result};
pub use fit::{LineFit, ScalingFit};
pub use geometry::{bracket, Builtin, ConvexDomain, ExitData, GammaRegion, PhaseState};
pub use trajectories::{BoundaryCondition, Cycle, CycleEntry, DiffuseLaw};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;
