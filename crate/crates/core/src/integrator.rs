//! Fixed-step RK4 discretization of the three-body vector field and its exact
//! discrete sensitivities.
//!
//! The sensitivity recursion differentiates the RK4 stages directly, so the
//! returned Jacobians are exact derivatives of the discrete map (not of the
//! continuous flow).

use nalgebra::{Matrix6, Matrix6x3};

use crate::dynamics::{er3bp_jacobians, er3bp_rhs, ControlInput, SpacecraftState, ThreeBodyParams};
use crate::error::{Error, Result};

/// Butcher data of the classical RK4 scheme in the staged form
/// `k_i = f(theta + c_i h, xi + a_i h k_{i-1})`, `xi+ = xi + h/|b|_1 sum b_i k_i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RkCoefficients {
    pub a: [f64; 4],
    pub b: [f64; 4],
    pub c: [f64; 4],
}

pub const RK4: RkCoefficients = RkCoefficients {
    a: [0.0, 0.5, 0.5, 1.0],
    b: [1.0, 2.0, 2.0, 1.0],
    c: [0.0, 0.5, 0.5, 1.0],
};

impl RkCoefficients {
    pub fn b_norm(&self) -> f64 {
        self.b.iter().map(|b| b.abs()).sum()
    }
}

/// Next state together with `d next / d state` and `d next / d u`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteStepResult {
    pub next_state: SpacecraftState,
    pub state_sensitivity: Matrix6<f64>,
    pub control_sensitivity: Matrix6x3<f64>,
}

fn check_step(dtheta: f64) -> Result<()> {
    if !(dtheta >= 0.0 && dtheta.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "step {dtheta} must be finite and >= 0"
        )));
    }
    Ok(())
}

/// Shared stage loop; sensitivities are accumulated only when requested.
fn rk4_core(
    theta: f64,
    state: &SpacecraftState,
    u: &ControlInput,
    dtheta: f64,
    params: &ThreeBodyParams,
    sensitivities: bool,
) -> Result<DiscreteStepResult> {
    check_step(dtheta)?;
    let rk = &RK4;
    let scale = dtheta / rk.b_norm();
    let mut k_prev = SpacecraftState::zeros();
    let mut a_prev = Matrix6::<f64>::zeros();
    let mut b_prev = Matrix6x3::<f64>::zeros();
    let mut k_sum = SpacecraftState::zeros();
    let mut a_sum = Matrix6::<f64>::zeros();
    let mut b_sum = Matrix6x3::<f64>::zeros();
    for i in 0..4 {
        let theta_i = theta + rk.c[i] * dtheta;
        let xi_i = state + k_prev * (rk.a[i] * dtheta);
        let k_i = er3bp_rhs(theta_i, &xi_i, u, params)?;
        k_sum += k_i * rk.b[i];
        if sensitivities {
            let (jx, ju) = er3bp_jacobians(theta_i, &xi_i, u, params)?;
            let a_i = jx * (Matrix6::identity() + a_prev * (rk.a[i] * dtheta));
            let b_i = jx * (b_prev * (rk.a[i] * dtheta)) + ju;
            a_sum += a_i * rk.b[i];
            b_sum += b_i * rk.b[i];
            a_prev = a_i;
            b_prev = b_i;
        }
        k_prev = k_i;
    }
    Ok(DiscreteStepResult {
        next_state: state + k_sum * scale,
        state_sensitivity: Matrix6::identity() + a_sum * scale,
        control_sensitivity: b_sum * scale,
    })
}

/// One RK4 step with the control held constant over the interval.
pub fn rk4_step(
    theta: f64,
    state: &SpacecraftState,
    u: &ControlInput,
    dtheta: f64,
    params: &ThreeBodyParams,
) -> Result<SpacecraftState> {
    Ok(rk4_core(theta, state, u, dtheta, params, false)?.next_state)
}

/// One RK4 step plus its exact state and control sensitivities.
pub fn rk4_step_with_sensitivities(
    theta: f64,
    state: &SpacecraftState,
    u: &ControlInput,
    dtheta: f64,
    params: &ThreeBodyParams,
) -> Result<DiscreteStepResult> {
    rk4_core(theta, state, u, dtheta, params, true)
}

/// Rolls the discrete model forward; returns `controls.len() + 1` states.
pub fn propagate(
    theta0: f64,
    state0: &SpacecraftState,
    controls: &[ControlInput],
    dtheta: f64,
    params: &ThreeBodyParams,
) -> Result<Vec<SpacecraftState>> {
    let mut traj = Vec::with_capacity(controls.len() + 1);
    traj.push(*state0);
    let mut x = *state0;
    for (k, u) in controls.iter().enumerate() {
        x = rk4_step(theta0 + k as f64 * dtheta, &x, u, dtheta, params)?;
        traj.push(x);
    }
    Ok(traj)
}

/// Plant propagation over one controller interval: `substeps` RK4 steps of
/// the full model, with `noise` added to `u` as a constant acceleration.
pub fn propagate_plant(
    theta0: f64,
    state0: &SpacecraftState,
    u: &ControlInput,
    dtheta: f64,
    params: &ThreeBodyParams,
    substeps: usize,
    noise: &ControlInput,
) -> Result<SpacecraftState> {
    if substeps == 0 {
        return Err(Error::InvalidInput("plant substeps must be >= 1".into()));
    }
    let h = dtheta / substeps as f64;
    let forcing = u + noise;
    let mut x = *state0;
    for i in 0..substeps {
        x = rk4_step(theta0 + i as f64 * h, &x, &forcing, h, params)?;
    }
    Ok(x)
}

/// Unforced propagation over `span` using equal RK4 steps no longer than
/// `max_step`.
pub fn propagate_fine(
    theta0: f64,
    state0: &SpacecraftState,
    span: f64,
    max_step: f64,
    params: &ThreeBodyParams,
) -> Result<SpacecraftState> {
    check_step(span)?;
    if span == 0.0 {
        return Ok(*state0);
    }
    let n = (span / max_step).ceil().max(1.0) as usize;
    let h = span / n as f64;
    let zero = ControlInput::zeros();
    let mut x = *state0;
    for i in 0..n {
        x = rk4_step(theta0 + i as f64 * h, &x, &zero, h, params)?;
    }
    Ok(x)
}

/// Unforced propagation with the accumulated discrete state-transition matrix.
pub fn propagate_fine_with_stm(
    theta0: f64,
    state0: &SpacecraftState,
    span: f64,
    max_step: f64,
    params: &ThreeBodyParams,
) -> Result<(SpacecraftState, Matrix6<f64>)> {
    check_step(span)?;
    let mut stm = Matrix6::identity();
    if span == 0.0 {
        return Ok((*state0, stm));
    }
    let n = (span / max_step).ceil().max(1.0) as usize;
    let h = span / n as f64;
    let zero = ControlInput::zeros();
    let mut x = *state0;
    for i in 0..n {
        let step = rk4_step_with_sensitivities(theta0 + i as f64 * h, &x, &zero, h, params)?;
        stm = step.state_sensitivity * stm;
        x = step.next_state;
    }
    Ok((x, stm))
}
