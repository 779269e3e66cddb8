use thiserror::Error;

use crate::trajectories::Cycle;

/// Errors raised by the geometry, trajectory and estimator layers.
#[derive(Debug, Error)]
pub enum KinError {
    #[error("degenerate gradient of the level-set function at {0:?}")]
    DegenerateGradient([f64; 3]),
    #[error("no exit point found along the backward ray")]
    NoExit,
    #[error("point is not on the boundary (|xi| = {0:e})")]
    NotOnBoundary(f64),
    #[error("point lies outside the closed domain (xi = {0:e})")]
    OutsideDomain(f64),
    #[error("grazing boundary state: n.v = {0:e}")]
    GrazingDegenerate(f64),
    #[error("bounce cap of {cap} exceeded before reaching s_min")]
    BounceCapExceeded { cap: usize, partial: Box<Cycle> },
    #[error("trajectory stalled: exit time below 1e-13 on consecutive bounces")]
    GrazingStall,
    #[error("evaluation time {0} coincides with a bounce time")]
    AtBounceTime(f64),
    #[error("closed-form disk cycle undefined at the centre")]
    CenterDegenerate,
    #[error("grazing exit, n.v = 0")]
    GrazingExit,
    #[error("finite-difference stencil crosses a bounce after step refinement")]
    SegmentCrossing,
    #[error("non-finite Monte Carlo sample")]
    NonFiniteSample,
    #[error("quadrature failed to converge: {0}")]
    QuadratureDivergence(String),
    #[error("parameter violation: {0}")]
    ParameterViolation(String),
}

pub type Result<T> = std::result::Result<T, KinError>;
