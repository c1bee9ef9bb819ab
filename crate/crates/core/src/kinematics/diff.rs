//! Tape-recorded versions of the state-transition functions, used wherever
//! gradients must flow through the kinematics (training and gradient checks).
//!
//! States are held as four one-element tensors. The formulas mirror the f64
//! implementations in the parent module exactly; a parity test pins them
//! together.

use super::KinematicMode;
use crate::autodiff::{Result, Scalar, Tape, Tensor};

/// Agent state as tape tensors, one element each.
#[derive(Debug, Clone)]
pub struct StateTensors<T: Scalar> {
    pub x: Tensor<T>,
    pub y: Tensor<T>,
    pub psi: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Scalar> StateTensors<T> {
    pub fn constant(s: crate::scene::AgentState) -> Self {
        StateTensors {
            x: Tensor::scalar_f64(s.x),
            y: Tensor::scalar_f64(s.y),
            psi: Tensor::scalar_f64(s.psi),
            v: Tensor::scalar_f64(s.v),
        }
    }

    pub fn to_state(&self) -> crate::scene::AgentState {
        crate::scene::AgentState::new(
            self.x.item().to_f64(),
            self.y.item().to_f64(),
            self.psi.item().to_f64(),
            self.v.item().to_f64(),
        )
    }
}

/// Discrete bicycle step on the tape; mirrors `kinematics::bicycle_step`.
pub fn bicycle_step<T: Scalar>(
    tape: &mut Tape<T>,
    s: &StateTensors<T>,
    alpha: &Tensor<T>,
    beta: &Tensor<T>,
    l_r: f64,
    dt: f64,
) -> Result<StateTensors<T>> {
    assert!(dt > 0.0 && l_r > 0.0, "dt and l_r must be positive");
    let dt_t = Tensor::scalar_f64(dt);
    let a_dt = tape.mul(alpha, &dt_t)?;
    let v = tape.add(&s.v, &a_dt)?;
    let heading = tape.add(&s.psi, beta)?;
    let cos_h = tape.cos(&heading)?;
    let sin_h = tape.sin(&heading)?;
    let v_dt = tape.mul(&v, &dt_t)?;
    let dx = tape.mul(&v_dt, &cos_h)?;
    let dy = tape.mul(&v_dt, &sin_h)?;
    let x = tape.add(&s.x, &dx)?;
    let y = tape.add(&s.y, &dy)?;
    let sin_b = tape.sin(beta)?;
    let rate = tape.mul(&v, &Tensor::scalar_f64(dt / l_r))?;
    let dpsi = tape.mul(&rate, &sin_b)?;
    let psi_raw = tape.add(&s.psi, &dpsi)?;
    let psi = tape.wrap_angle(&psi_raw)?;
    Ok(StateTensors { x, y, psi, v })
}

/// Unconstrained step on the tape: componentwise addition, heading re-wrapped.
pub fn unconstrained_step<T: Scalar>(
    tape: &mut Tape<T>,
    s: &StateTensors<T>,
    dx: &Tensor<T>,
    dy: &Tensor<T>,
    dpsi: &Tensor<T>,
    dv: &Tensor<T>,
) -> Result<StateTensors<T>> {
    let x = tape.add(&s.x, dx)?;
    let y = tape.add(&s.y, dy)?;
    let psi_raw = tape.add(&s.psi, dpsi)?;
    let psi = tape.wrap_angle(&psi_raw)?;
    let v = tape.add(&s.v, dv)?;
    Ok(StateTensors { x, y, psi, v })
}

/// Displacement step on the tape. At an exactly zero displacement the slip
/// angle branch switches to the constant 0, keeping gradients finite.
pub fn displacement_step<T: Scalar>(
    tape: &mut Tape<T>,
    s: &StateTensors<T>,
    dx: &Tensor<T>,
    dy: &Tensor<T>,
    l_r: f64,
    dt: f64,
) -> Result<StateTensors<T>> {
    assert!(dt > 0.0 && l_r > 0.0, "dt and l_r must be positive");
    let zero_disp = dx.item() == T::ZERO && dy.item() == T::ZERO;
    let (dist, beta) = if zero_disp {
        (Tensor::scalar(T::ZERO), Tensor::scalar(T::ZERO))
    } else {
        let dx2 = tape.mul(dx, dx)?;
        let dy2 = tape.mul(dy, dy)?;
        let sq = tape.add(&dx2, &dy2)?;
        let dist = tape.sqrt(&sq)?;
        let dir = tape.atan2(dy, dx)?;
        let rel = tape.sub(&dir, &s.psi)?;
        (dist, tape.wrap_angle(&rel)?)
    };
    // alpha = (dist/dt - v) / dt
    let v_target = tape.mul(&dist, &Tensor::scalar_f64(1.0 / dt))?;
    let dv = tape.sub(&v_target, &s.v)?;
    let alpha = tape.mul(&dv, &Tensor::scalar_f64(1.0 / dt))?;
    bicycle_step(tape, s, &alpha, &beta, l_r, dt)
}

/// Rotates an ego-frame delta into the world frame by the current heading.
fn rotate_by_heading<T: Scalar>(
    tape: &mut Tape<T>,
    psi: &Tensor<T>,
    dx: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let c = tape.cos(psi)?;
    let s = tape.sin(psi)?;
    let cx = tape.mul(&c, dx)?;
    let sy = tape.mul(&s, dy)?;
    let wx = tape.sub(&cx, &sy)?;
    let sx = tape.mul(&s, dx)?;
    let cy = tape.mul(&c, dy)?;
    let wy = tape.add(&sx, &cy)?;
    Ok((wx, wy))
}

/// Dispatches one step in the configured mode; `action` holds the raw action
/// components as a flat tensor of `mode.action_dim()` elements.
pub fn step<T: Scalar>(
    tape: &mut Tape<T>,
    s: &StateTensors<T>,
    action: &Tensor<T>,
    mode: KinematicMode,
    l_r: f64,
    dt: f64,
) -> Result<StateTensors<T>> {
    debug_assert_eq!(action.len(), mode.action_dim());
    match mode {
        KinematicMode::Bicycle => {
            let alpha = tape.slice(action, 0, 1)?;
            let beta = tape.slice(action, 1, 2)?;
            bicycle_step(tape, s, &alpha, &beta, l_r, dt)
        }
        KinematicMode::Unconstrained => {
            let dx = tape.slice(action, 0, 1)?;
            let dy = tape.slice(action, 1, 2)?;
            let dpsi = tape.slice(action, 2, 3)?;
            let dv = tape.slice(action, 3, 4)?;
            unconstrained_step(tape, s, &dx, &dy, &dpsi, &dv)
        }
        KinematicMode::Displacement => {
            let dx = tape.slice(action, 0, 1)?;
            let dy = tape.slice(action, 1, 2)?;
            displacement_step(tape, s, &dx, &dy, l_r, dt)
        }
        KinematicMode::OrientedUnconstrained => {
            let dx = tape.slice(action, 0, 1)?;
            let dy = tape.slice(action, 1, 2)?;
            let dpsi = tape.slice(action, 2, 3)?;
            let dv = tape.slice(action, 3, 4)?;
            let (wx, wy) = rotate_by_heading(tape, &s.psi, &dx, &dy)?;
            unconstrained_step(tape, s, &wx, &wy, &dpsi, &dv)
        }
        KinematicMode::OrientedDisplacement => {
            let dx = tape.slice(action, 0, 1)?;
            let dy = tape.slice(action, 1, 2)?;
            let (wx, wy) = rotate_by_heading(tape, &s.psi, &dx, &dy)?;
            displacement_step(tape, s, &wx, &wy, l_r, dt)
        }
    }
}
