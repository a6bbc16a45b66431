//! Velocity-form vehicle model in the spatial domain.
//!
//! State `x = [vx, vy, yaw_rate, e_theta, e_y, gamma, beta, tau_v, t]`, input
//! `u = [gamma_rate, beta_rate, tau_v_rate, eta]`. The lateral and yaw accelerations come from an
//! [`AccelerationModel`]; everything else is kinematics. Integration runs over arc length with
//! classical RK4 and forward sensitivities.

use std::sync::Arc;

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::GpModel;
use crate::reduce::LocalModel;
use crate::track::Track;

pub const NX: usize = 9;
pub const NU: usize = 4;
pub const NGP: usize = 6;
/// Minimum progress rate for the spatial reformulation, m/s.
pub const PROGRESS_EPS: f64 = 0.1;
pub const CURVATURE_SINGULARITY_TOL: f64 = 1e-6;

pub type StateVec = SVector<f64, NX>;
pub type ControlVec = SVector<f64, NU>;
pub type GpInput = [f64; NGP];
pub type StateJacobian = SMatrix<f64, NX, NX>;
pub type InputJacobian = SMatrix<f64, NX, NU>;

pub mod idx {
    pub const VX: usize = 0;
    pub const VY: usize = 1;
    pub const R: usize = 2;
    pub const ETHETA: usize = 3;
    pub const EY: usize = 4;
    pub const GAMMA: usize = 5;
    pub const BETA: usize = 6;
    pub const TAU: usize = 7;
    pub const T: usize = 8;

    pub const GAMMA_RATE: usize = 0;
    pub const BETA_RATE: usize = 1;
    pub const TAU_RATE: usize = 2;
    pub const ETA: usize = 3;
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    pub vx: f64,
    pub vy: f64,
    pub yaw_rate: f64,
    pub e_theta: f64,
    pub e_y: f64,
    pub gamma: f64,
    pub beta: f64,
    pub tau_v: f64,
    pub t: f64,
}

impl VehicleState {
    pub fn to_vector(&self) -> StateVec {
        StateVec::from([
            self.vx,
            self.vy,
            self.yaw_rate,
            self.e_theta,
            self.e_y,
            self.gamma,
            self.beta,
            self.tau_v,
            self.t,
        ])
    }

    pub fn from_vector(x: &StateVec) -> Self {
        Self {
            vx: x[0],
            vy: x[1],
            yaw_rate: x[2],
            e_theta: x[3],
            e_y: x[4],
            gamma: x[5],
            beta: x[6],
            tau_v: x[7],
            t: x[8],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub gamma_rate: f64,
    pub beta_rate: f64,
    pub tau_v_rate: f64,
    pub eta: f64,
}

impl ControlInput {
    pub fn to_vector(&self) -> ControlVec {
        ControlVec::from([self.gamma_rate, self.beta_rate, self.tau_v_rate, self.eta])
    }

    pub fn from_vector(u: &ControlVec) -> Self {
        Self {
            gamma_rate: u[0],
            beta_rate: u[1],
            tau_v_rate: u[2],
            eta: u[3],
        }
    }
}

/// Regressor `[vx, vy, yaw_rate, gamma, beta, tau_v]`.
pub fn gp_input_from_state(x: &StateVec) -> GpInput {
    [
        x[idx::VX],
        x[idx::VY],
        x[idx::R],
        x[idx::GAMMA],
        x[idx::BETA],
        x[idx::TAU],
    ]
}

/// State slot fed by each regressor slot.
pub const GP_INPUT_STATE_SLOTS: [usize; NGP] =
    [idx::VX, idx::VY, idx::R, idx::GAMMA, idx::BETA, idx::TAU];

/// Accelerations and their gradients with respect to the regressor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccelEval {
    pub lateral: f64,
    pub yaw: f64,
    pub d_lateral: GpInput,
    pub d_yaw: GpInput,
}

/// Source of the lateral (m/s^2) and yaw (rad/s^2) accelerations.
pub trait AccelerationModel: Send + Sync {
    fn eval(&self, input: &GpInput) -> AccelEval;

    fn means(&self, input: &GpInput) -> (f64, f64) {
        let e = self.eval(input);
        (e.lateral, e.yaw)
    }
}

/// A GP channel, either a full model or a per-node local one.
#[derive(Debug, Clone)]
pub enum GpChannel {
    Full(Arc<GpModel>),
    Local(Arc<LocalModel>),
}

impl GpChannel {
    pub fn model(&self) -> &GpModel {
        match self {
            GpChannel::Full(m) => m,
            GpChannel::Local(l) => &l.model,
        }
    }
}

/// Black-box accelerations from two GP posterior means.
#[derive(Debug, Clone)]
pub struct GpAccelerations {
    pub lateral: GpChannel,
    pub yaw: GpChannel,
}

impl GpAccelerations {
    pub fn new(lateral: GpChannel, yaw: GpChannel) -> Result<Self> {
        if lateral.model().dataset().dim() != NGP || yaw.model().dataset().dim() != NGP {
            return Err(Error::invalid("acceleration GPs must take 6 inputs"));
        }
        Ok(Self { lateral, yaw })
    }
}

impl AccelerationModel for GpAccelerations {
    fn eval(&self, input: &GpInput) -> AccelEval {
        let mut d_lateral = [0.0; NGP];
        let mut d_yaw = [0.0; NGP];
        let lateral = self
            .lateral
            .model()
            .mean_and_gradient_into(input, &mut d_lateral);
        let yaw = self.yaw.model().mean_and_gradient_into(input, &mut d_yaw);
        AccelEval {
            lateral,
            yaw,
            d_lateral,
            d_yaw,
        }
    }

    fn means(&self, input: &GpInput) -> (f64, f64) {
        (
            self.lateral.model().mean_unchecked(input),
            self.yaw.model().mean_unchecked(input),
        )
    }
}

/// Model with identically zero lateral and yaw accelerations.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroAccelerations;

impl AccelerationModel for ZeroAccelerations {
    fn eval(&self, _input: &GpInput) -> AccelEval {
        AccelEval {
            lateral: 0.0,
            yaw: 0.0,
            d_lateral: [0.0; NGP],
            d_yaw: [0.0; NGP],
        }
    }
}

/// Progress rate and Frenet error rates `(s_dot, e_theta_dot, e_y_dot)`.
pub fn frenet_rates(x: &StateVec, zeta: f64) -> Result<(f64, f64, f64)> {
    let denom = 1.0 - zeta * x[idx::EY];
    if denom.abs() < CURVATURE_SINGULARITY_TOL {
        return Err(Error::Singularity(format!(
            "1 - curvature * e_y = {denom:e}"
        )));
    }
    let (sn, cs) = x[idx::ETHETA].sin_cos();
    let s_dot = (x[idx::VX] * cs - x[idx::VY] * sn) / denom;
    let e_theta_dot = x[idx::R] - zeta * s_dot;
    let e_y_dot = x[idx::VX] * sn + x[idx::VY] * cs;
    Ok((s_dot, e_theta_dot, e_y_dot))
}

/// Time derivative of the state.
pub fn time_dynamics(
    x: &StateVec,
    u: &ControlVec,
    zeta: f64,
    model: &dyn AccelerationModel,
) -> Result<StateVec> {
    let (_, e_theta_dot, e_y_dot) = frenet_rates(x, zeta)?;
    let (lat, yaw) = model.means(&gp_input_from_state(x));
    Ok(StateVec::from([
        x[idx::GAMMA],
        lat,
        yaw,
        e_theta_dot,
        e_y_dot,
        u[idx::GAMMA_RATE],
        u[idx::BETA_RATE],
        u[idx::TAU_RATE],
        1.0,
    ]))
}

fn checked_progress(s_dot: f64) -> Result<f64> {
    if !s_dot.is_finite() {
        return Err(Error::numerical("non-finite progress rate"));
    }
    if s_dot <= PROGRESS_EPS {
        return Err(Error::Singularity(format!("progress rate {s_dot:.4} m/s")));
    }
    Ok(s_dot)
}

/// Arc-length derivative of the state, `time_dynamics / s_dot`.
pub fn spatial_dynamics(
    x: &StateVec,
    u: &ControlVec,
    zeta: f64,
    model: &dyn AccelerationModel,
) -> Result<StateVec> {
    let (s_dot, _, _) = frenet_rates(x, zeta)?;
    let s_dot = checked_progress(s_dot)?;
    Ok(time_dynamics(x, u, zeta, model)? / s_dot)
}

/// Spatial dynamics together with its Jacobians.
pub fn spatial_dynamics_jac(
    x: &StateVec,
    u: &ControlVec,
    zeta: f64,
    model: &dyn AccelerationModel,
) -> Result<(StateVec, StateJacobian, InputJacobian)> {
    let denom = 1.0 - zeta * x[idx::EY];
    let (s_dot, e_theta_dot, e_y_dot) = frenet_rates(x, zeta)?;
    let s_dot = checked_progress(s_dot)?;
    let acc = model.eval(&gp_input_from_state(x));
    let f = StateVec::from([
        x[idx::GAMMA],
        acc.lateral,
        acc.yaw,
        e_theta_dot,
        e_y_dot,
        u[idx::GAMMA_RATE],
        u[idx::BETA_RATE],
        u[idx::TAU_RATE],
        1.0,
    ]);

    let (vx, vy) = (x[idx::VX], x[idx::VY]);
    let (sn, cs) = x[idx::ETHETA].sin_cos();
    let mut ds = SVector::<f64, NX>::zeros();
    ds[idx::VX] = cs / denom;
    ds[idx::VY] = -sn / denom;
    ds[idx::ETHETA] = (-vx * sn - vy * cs) / denom;
    ds[idx::EY] = s_dot * zeta / denom;

    let mut jf = StateJacobian::zeros();
    jf[(0, idx::GAMMA)] = 1.0;
    for (k, &slot) in GP_INPUT_STATE_SLOTS.iter().enumerate() {
        jf[(1, slot)] = acc.d_lateral[k];
        jf[(2, slot)] = acc.d_yaw[k];
    }
    for c in 0..NX {
        jf[(3, c)] = -zeta * ds[c];
    }
    jf[(3, idx::R)] += 1.0;
    jf[(4, idx::VX)] = sn;
    jf[(4, idx::VY)] = cs;
    jf[(4, idx::ETHETA)] = vx * cs - vy * sn;

    let inv = 1.0 / s_dot;
    let big_f = f * inv;
    let jx = jf * inv - big_f * ds.transpose() * inv;
    let mut ju = InputJacobian::zeros();
    ju[(5, idx::GAMMA_RATE)] = inv;
    ju[(6, idx::BETA_RATE)] = inv;
    ju[(7, idx::TAU_RATE)] = inv;
    Ok((big_f, jx, ju))
}

/// One classical RK4 step of `f` over `h` with `u` held.
pub fn rk4_step<const N: usize, F>(f: F, x: &SVector<f64, N>, h: f64) -> Result<SVector<f64, N>>
where
    F: Fn(&SVector<f64, N>) -> Result<SVector<f64, N>>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("RK4 step must be positive"));
    }
    let k1 = f(x)?;
    let k2 = f(&(x + k1 * (0.5 * h)))?;
    let k3 = f(&(x + k2 * (0.5 * h)))?;
    let k4 = f(&(x + k3 * h))?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

/// Number of control cells of length `ts` in `[s_from, s_to]`, at least one.
pub fn default_substeps(s_from: f64, s_to: f64, ts: f64) -> usize {
    ((s_to - s_from) / ts).round().max(1.0) as usize
}

fn check_interval(s_from: f64, s_to: f64, substeps: usize) -> Result<f64> {
    if !(s_to > s_from) || !s_from.is_finite() || !s_to.is_finite() {
        return Err(Error::invalid(format!(
            "empty integration interval [{s_from}, {s_to}]"
        )));
    }
    if substeps == 0 {
        return Err(Error::invalid("at least one substep required"));
    }
    Ok((s_to - s_from) / substeps as f64)
}

/// Integrates the spatial dynamics from `s_from` to `s_to` in `substeps` RK4 steps, curvature
/// sampled at each substep start.
pub fn integrate_interval(
    x: &StateVec,
    u: &ControlVec,
    s_from: f64,
    s_to: f64,
    model: &dyn AccelerationModel,
    track: &Track,
    substeps: usize,
) -> Result<StateVec> {
    let h = check_interval(s_from, s_to, substeps)?;
    let mut xk = *x;
    for k in 0..substeps {
        let zeta = track.curvature_at(s_from + k as f64 * h)?;
        xk = rk4_step(|z| spatial_dynamics(z, u, zeta, model), &xk, h)?;
    }
    Ok(xk)
}

/// End state and its sensitivities `A = dx_end/dx`, `B = dx_end/du`, propagated through every
/// RK4 stage.
pub fn sensitivities(
    x: &StateVec,
    u: &ControlVec,
    s_from: f64,
    s_to: f64,
    model: &dyn AccelerationModel,
    track: &Track,
    substeps: usize,
) -> Result<(StateVec, StateJacobian, InputJacobian)> {
    let h = check_interval(s_from, s_to, substeps)?;
    let mut xk = *x;
    let mut a = StateJacobian::identity();
    let mut b = InputJacobian::zeros();
    for k in 0..substeps {
        let zeta = track.curvature_at(s_from + k as f64 * h)?;
        let (k1, j1, g1) = spatial_dynamics_jac(&xk, u, zeta, model)?;
        let a1 = j1 * a;
        let b1 = j1 * b + g1;
        let x2 = xk + k1 * (0.5 * h);
        let (k2, j2, g2) = spatial_dynamics_jac(&x2, u, zeta, model)?;
        let a2 = j2 * (a + a1 * (0.5 * h));
        let b2 = j2 * (b + b1 * (0.5 * h)) + g2;
        let x3 = xk + k2 * (0.5 * h);
        let (k3, j3, g3) = spatial_dynamics_jac(&x3, u, zeta, model)?;
        let a3 = j3 * (a + a2 * (0.5 * h));
        let b3 = j3 * (b + b2 * (0.5 * h)) + g3;
        let x4 = xk + k3 * h;
        let (k4, j4, g4) = spatial_dynamics_jac(&x4, u, zeta, model)?;
        let a4 = j4 * (a + a3 * h);
        let b4 = j4 * (b + b3 * h) + g4;
        xk += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        a += (a1 + a2 * 2.0 + a3 * 2.0 + a4) * (h / 6.0);
        b += (b1 + b2 * 2.0 + b3 * 2.0 + b4) * (h / 6.0);
    }
    Ok((xk, a, b))
}
