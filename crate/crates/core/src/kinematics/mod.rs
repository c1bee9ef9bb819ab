//! Differentiable state-transition functions: the kinematic bicycle model and
//! the alternative action spaces (unconstrained, displacement, and their
//! oriented variants).
//!
//! The discrete update order is pinned: speed first, then positions and
//! heading computed with the *post-acceleration* speed. Swapping that order
//! changes results at O(dt), so tests assert it explicitly.

pub mod diff;

use crate::geom::wrap_angle;
use crate::scene::AgentState;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KinematicsError {
    #[error("dt must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("rear axle distance must be positive, got {0}")]
    NonPositiveRearAxle(f64),
}

/// Acceleration at the vehicle center plus the slip angle between heading and
/// instantaneous velocity. With the front axle distance taken as zero, the
/// slip angle is commanded directly and doubles as the steering action.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BicycleAction {
    pub alpha: f64,
    pub beta: f64,
}

impl BicycleAction {
    pub fn new(alpha: f64, beta: f64) -> Self {
        BicycleAction {
            alpha,
            beta: wrap_angle(beta),
        }
    }
}

/// Per-step deltas applied to all four state components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnconstrainedAction {
    pub dx: f64,
    pub dy: f64,
    pub dpsi: f64,
    pub dv: f64,
}

/// Per-step position deltas; orientation and speed follow from the bicycle
/// model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisplacementAction {
    pub dx: f64,
    pub dy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KinematicMode {
    Bicycle,
    Unconstrained,
    Displacement,
    OrientedUnconstrained,
    OrientedDisplacement,
}

impl KinematicMode {
    pub fn action_dim(self) -> usize {
        match self {
            KinematicMode::Bicycle => 2,
            KinematicMode::Unconstrained | KinematicMode::OrientedUnconstrained => 4,
            KinematicMode::Displacement | KinematicMode::OrientedDisplacement => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KinematicMode::Bicycle => "bicycle",
            KinematicMode::Unconstrained => "unconstrained",
            KinematicMode::Displacement => "displacement",
            KinematicMode::OrientedUnconstrained => "oriented-unconstrained",
            KinematicMode::OrientedDisplacement => "oriented-displacement",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bicycle" => Some(KinematicMode::Bicycle),
            "unconstrained" => Some(KinematicMode::Unconstrained),
            "displacement" => Some(KinematicMode::Displacement),
            "oriented-unconstrained" => Some(KinematicMode::OrientedUnconstrained),
            "oriented-displacement" => Some(KinematicMode::OrientedDisplacement),
            _ => None,
        }
    }
}

/// An action in whichever space the configured mode uses. Oriented modes carry
/// the same payload as their world-frame counterparts; the rotation happens in
/// the step function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Action {
    Bicycle(BicycleAction),
    Unconstrained(UnconstrainedAction),
    Displacement(DisplacementAction),
}

impl Action {
    pub fn to_vec(&self) -> Vec<f64> {
        match *self {
            Action::Bicycle(a) => vec![a.alpha, a.beta],
            Action::Unconstrained(a) => vec![a.dx, a.dy, a.dpsi, a.dv],
            Action::Displacement(a) => vec![a.dx, a.dy],
        }
    }

    pub fn from_slice(mode: KinematicMode, v: &[f64]) -> Self {
        match mode {
            KinematicMode::Bicycle => Action::Bicycle(BicycleAction::new(v[0], v[1])),
            KinematicMode::Unconstrained | KinematicMode::OrientedUnconstrained => {
                Action::Unconstrained(UnconstrainedAction {
                    dx: v[0],
                    dy: v[1],
                    dpsi: v[2],
                    dv: v[3],
                })
            }
            KinematicMode::Displacement | KinematicMode::OrientedDisplacement => {
                Action::Displacement(DisplacementAction { dx: v[0], dy: v[1] })
            }
        }
    }
}

fn check_dt_lr(dt: f64, l_r: f64) -> Result<(), KinematicsError> {
    if !(dt > 0.0) {
        return Err(KinematicsError::NonPositiveDt(dt));
    }
    if !(l_r > 0.0) {
        return Err(KinematicsError::NonPositiveRearAxle(l_r));
    }
    Ok(())
}

/// One discrete bicycle-model step.
///
/// Speed updates first; position and heading use the updated speed:
///
/// ```text
/// v' = v + alpha dt
/// x' = x + v' cos(psi + beta) dt
/// y' = y + v' sin(psi + beta) dt
/// psi' = wrap(psi + (v'/l_r) sin(beta) dt)
/// ```
pub fn bicycle_step(
    s: AgentState,
    a: BicycleAction,
    l_r: f64,
    dt: f64,
) -> Result<AgentState, KinematicsError> {
    check_dt_lr(dt, l_r)?;
    let v = s.v + a.alpha * dt;
    let heading = s.psi + a.beta;
    let x = s.x + v * heading.cos() * dt;
    let y = s.y + v * heading.sin() * dt;
    let psi = wrap_angle(s.psi + v / l_r * a.beta.sin() * dt);
    Ok(AgentState { x, y, psi, v })
}

/// Componentwise addition of the deltas; the heading is re-wrapped.
pub fn unconstrained_step(s: AgentState, a: UnconstrainedAction) -> AgentState {
    AgentState {
        x: s.x + a.dx,
        y: s.y + a.dy,
        psi: wrap_angle(s.psi + a.dpsi),
        v: s.v + a.dv,
    }
}

/// Converts the position delta into bicycle actions and applies
/// [`bicycle_step`], so the position lands exactly at `(x+dx, y+dy)` while
/// heading and speed follow the bicycle update.
///
/// A zero displacement makes the direction ill-defined; the slip angle is
/// defined as 0 (straight) in that case, which keeps the gradient path finite.
pub fn displacement_step(
    s: AgentState,
    a: DisplacementAction,
    l_r: f64,
    dt: f64,
) -> Result<AgentState, KinematicsError> {
    check_dt_lr(dt, l_r)?;
    let dist = a.dx.hypot(a.dy);
    let alpha = (dist / dt - s.v) / dt;
    let beta = if dist == 0.0 {
        0.0
    } else {
        wrap_angle(a.dy.atan2(a.dx) - s.psi)
    };
    bicycle_step(s, BicycleAction { alpha, beta }, l_r, dt)
}

/// Applies an action whose position components live in the agent's own frame:
/// `(dx, dy)` is rotated by the current heading into the world frame, then the
/// corresponding non-oriented step runs.
pub fn oriented_step(
    s: AgentState,
    a: Action,
    mode: KinematicMode,
    l_r: f64,
    dt: f64,
) -> Result<AgentState, KinematicsError> {
    let (sin_psi, cos_psi) = s.psi.sin_cos();
    let rotate = |dx: f64, dy: f64| (cos_psi * dx - sin_psi * dy, sin_psi * dx + cos_psi * dy);
    match (mode, a) {
        (KinematicMode::OrientedUnconstrained, Action::Unconstrained(a)) => {
            let (dx, dy) = rotate(a.dx, a.dy);
            Ok(unconstrained_step(s, UnconstrainedAction { dx, dy, ..a }))
        }
        (KinematicMode::OrientedDisplacement, Action::Displacement(a)) => {
            let (dx, dy) = rotate(a.dx, a.dy);
            displacement_step(s, DisplacementAction { dx, dy }, l_r, dt)
        }
        _ => panic!("oriented_step called with mode {mode:?} and action {a:?}"),
    }
}

/// Dispatches one step in the configured mode.
pub fn step(
    s: AgentState,
    a: &Action,
    mode: KinematicMode,
    l_r: f64,
    dt: f64,
) -> Result<AgentState, KinematicsError> {
    match (mode, a) {
        (KinematicMode::Bicycle, Action::Bicycle(a)) => bicycle_step(s, *a, l_r, dt),
        (KinematicMode::Unconstrained, Action::Unconstrained(a)) => Ok(unconstrained_step(s, *a)),
        (KinematicMode::Displacement, Action::Displacement(a)) => displacement_step(s, *a, l_r, dt),
        (KinematicMode::OrientedUnconstrained, _) | (KinematicMode::OrientedDisplacement, _) => {
            oriented_step(s, *a, mode, l_r, dt)
        }
        _ => panic!("action {a:?} does not match mode {mode:?}"),
    }
}

/// Time derivative of the state under the continuous equations of motion,
/// ordered `(dv, dx, dy, dpsi)`. Serves as the reference oracle for testing
/// the discretization.
pub fn bicycle_continuous_derivative(
    s: AgentState,
    a: BicycleAction,
    l_r: f64,
) -> (f64, f64, f64, f64) {
    assert!(l_r > 0.0, "l_r must be positive");
    let heading = s.psi + a.beta;
    (
        a.alpha,
        s.v * heading.cos(),
        s.v * heading.sin(),
        s.v / l_r * a.beta.sin(),
    )
}
