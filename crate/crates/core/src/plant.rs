//! Ground-truth simulation plant: a dynamic single-track model with Pacejka lateral tire forces,
//! first-order actuator lags, static longitudinal load transfer and an elliptic derating of the
//! lateral force under longitudinal acceleration.
//!
//! [`NominalModel`] exposes the same force law, without actuator lags, as an
//! [`AccelerationModel`] for the controller.

use serde::{Deserialize, Serialize};

use crate::dynamics::{AccelEval, AccelerationModel, GpInput};
use crate::error::{Error, Result};
use crate::track::{FrenetPose, Track};

pub const GRAVITY: f64 = 9.81;
pub const STALL_SPEED: f64 = 0.1;
pub const MAX_PLANT_DT: f64 = 0.02;
const MIN_LOAD_RATIO: f64 = 0.1;
const MIN_DERATE_SQ: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantParams {
    pub mass: f64,
    pub yaw_inertia: f64,
    pub lf: f64,
    pub lr: f64,
    pub b_front: f64,
    pub c_front: f64,
    pub d_front: f64,
    pub b_rear: f64,
    pub c_rear: f64,
    pub d_rear: f64,
    /// Yaw moment per unit torque-vectoring command, N m.
    pub tv_gain: f64,
    /// Actuator time constants, s. Zero means the actuator follows the command instantly.
    pub lag_gamma: f64,
    pub lag_beta: f64,
    pub lag_tau: f64,
    pub combined_slip: bool,
    /// Longitudinal acceleration at which the lateral force vanishes, m/s^2.
    pub gamma_max: f64,
    pub load_transfer: bool,
    pub cog_height: f64,
    /// Quadratic drag, 1/m.
    pub drag: f64,
    /// Longitudinal loop tracks the body-frame acceleration exactly (`vx_dot = gamma_act`).
    pub ideal_longitudinal: bool,
}

impl Default for PlantParams {
    fn default() -> Self {
        let mass = 190.0;
        let (lf, lr) = (0.55, 0.65);
        let wb = lf + lr;
        Self {
            mass,
            yaw_inertia: 45.0,
            lf,
            lr,
            b_front: 3.0,
            c_front: 1.4,
            d_front: 0.8 * mass * GRAVITY * lr / wb,
            b_rear: 3.5,
            c_rear: 1.4,
            d_rear: 0.8 * mass * GRAVITY * lf / wb,
            tv_gain: 150.0,
            lag_gamma: 0.08,
            lag_beta: 0.12,
            lag_tau: 0.08,
            combined_slip: true,
            gamma_max: 0.8 * GRAVITY,
            load_transfer: true,
            cog_height: 0.3,
            drag: 0.0,
            ideal_longitudinal: false,
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.mass,
            self.yaw_inertia,
            self.lf,
            self.lr,
            self.b_front,
            self.c_front,
            self.d_front,
            self.b_rear,
            self.c_rear,
            self.d_rear,
            self.tv_gain,
            self.gamma_max,
        ];
        let nonneg = [
            self.lag_gamma,
            self.lag_beta,
            self.lag_tau,
            self.cog_height,
            self.drag,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0))
            || nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::invalid(
                "plant parameters must be positive and finite",
            ));
        }
        Ok(())
    }

    pub fn wheelbase(&self) -> f64 {
        self.lf + self.lr
    }

    /// Linear cornering stiffnesses `B C D` of the front and rear axle, N/rad.
    pub fn cornering_stiffness(&self) -> (f64, f64) {
        (
            self.b_front * self.c_front * self.d_front,
            self.b_rear * self.c_rear * self.d_rear,
        )
    }

    /// Peak-force scaling of each axle and its derivative with respect to `gamma`.
    fn peak_scaling(&self, gamma: f64) -> ((f64, f64), (f64, f64)) {
        let (mut sf, mut dsf, mut sr, mut dsr) = (1.0, 0.0, 1.0, 0.0);
        if self.load_transfer {
            let wb = self.wheelbase();
            let shift = self.mass * self.cog_height / wb;
            let fz_f = self.mass * GRAVITY * self.lr / wb;
            let fz_r = self.mass * GRAVITY * self.lf / wb;
            let rf = 1.0 - shift * gamma / fz_f;
            let rr = 1.0 + shift * gamma / fz_r;
            if rf > MIN_LOAD_RATIO {
                sf = rf;
                dsf = -shift / fz_f;
            } else {
                sf = MIN_LOAD_RATIO;
            }
            if rr > MIN_LOAD_RATIO {
                sr = rr;
                dsr = shift / fz_r;
            } else {
                sr = MIN_LOAD_RATIO;
            }
        }
        if self.combined_slip {
            let q = 1.0 - (gamma / self.gamma_max).powi(2);
            let (e, de) = if q > MIN_DERATE_SQ {
                let e = q.sqrt();
                (e, -gamma / (self.gamma_max * self.gamma_max * e))
            } else {
                (MIN_DERATE_SQ.sqrt(), 0.0)
            };
            dsf = dsf * e + sf * de;
            dsr = dsr * e + sr * de;
            sf *= e;
            sr *= e;
        }
        ((sf, dsf), (sr, dsr))
    }
}

fn pacejka(b: f64, c: f64, d: f64, alpha: f64) -> (f64, f64) {
    let ba = b * alpha;
    let phi = c * ba.atan();
    (d * phi.sin(), d * phi.cos() * c * b / (1.0 + ba * ba))
}

/// Axle lateral forces and their gradients with respect to `[vx, vy, r, gamma, beta]`.
#[derive(Debug, Clone, Copy)]
struct AxleForces {
    front: f64,
    rear: f64,
    d_front: [f64; 5],
    d_rear: [f64; 5],
}

fn axle_forces(p: &PlantParams, vx: f64, vy: f64, r: f64, gamma: f64, beta: f64) -> AxleForces {
    let ((sf, dsf), (sr, dsr)) = p.peak_scaling(gamma);
    let nf = vy + p.lf * r;
    let nr = vy - p.lr * r;
    let qf = vx * vx + nf * nf;
    let qr = vx * vx + nr * nr;
    let alpha_f = beta - nf.atan2(vx);
    let alpha_r = -nr.atan2(vx);
    let (ff, dff) = pacejka(p.b_front, p.c_front, p.d_front * sf, alpha_f);
    let (fr, dfr) = pacejka(p.b_rear, p.c_rear, p.d_rear * sr, alpha_r);
    // d alpha / d [vx, vy, r]
    let da_f = [nf / qf, -vx / qf, -p.lf * vx / qf];
    let da_r = [nr / qr, -vx / qr, p.lr * vx / qr];
    AxleForces {
        front: ff,
        rear: fr,
        d_front: [
            dff * da_f[0],
            dff * da_f[1],
            dff * da_f[2],
            if sf > 0.0 { ff * dsf / sf } else { 0.0 },
            dff,
        ],
        d_rear: [
            dfr * da_r[0],
            dfr * da_r[1],
            dfr * da_r[2],
            if sr > 0.0 { fr * dsr / sr } else { 0.0 },
            0.0,
        ],
    }
}

/// Lateral and yaw accelerations of the single-track model at actuator states
/// `(gamma, beta, tau_v)`, with gradients over the regressor `[vx, vy, r, gamma, beta, tau_v]`.
pub fn body_accelerations(p: &PlantParams, input: &GpInput) -> AccelEval {
    let [vx, vy, r, gamma, beta, tau] = *input;
    let f = axle_forces(p, vx, vy, r, gamma, beta);
    let (sb, cb) = beta.sin_cos();
    let m = p.mass;
    let iz = p.yaw_inertia;
    let lateral = (f.front * cb + f.rear) / m - r * vx;
    let yaw = (p.lf * f.front * cb - p.lr * f.rear + p.tv_gain * tau) / iz;
    let mut d_lateral = [0.0; 6];
    let mut d_yaw = [0.0; 6];
    for k in 0..5 {
        d_lateral[k] = (f.d_front[k] * cb + f.d_rear[k]) / m;
        d_yaw[k] = (p.lf * f.d_front[k] * cb - p.lr * f.d_rear[k]) / iz;
    }
    d_lateral[0] -= r;
    d_lateral[2] -= vx;
    d_lateral[4] -= f.front * sb / m;
    d_yaw[4] -= p.lf * f.front * sb / iz;
    d_yaw[5] = p.tv_gain / iz;
    AccelEval {
        lateral,
        yaw,
        d_lateral,
        d_yaw,
    }
}

/// Controller-side physics model: the plant force law with the command states taken as the
/// actuator states.
#[derive(Debug, Clone, Copy, Default)]
pub struct NominalModel {
    pub params: PlantParams,
}

impl NominalModel {
    pub fn new(params: PlantParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }
}

impl AccelerationModel for NominalModel {
    fn eval(&self, input: &GpInput) -> AccelEval {
        body_accelerations(&self.params, input)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlantState {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub vx: f64,
    pub vy: f64,
    pub yaw_rate: f64,
    pub gamma_act: f64,
    pub beta_act: f64,
    pub tau_act: f64,
}

/// Actuator commands `(gamma, beta, tau_v)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Commands {
    pub gamma: f64,
    pub beta: f64,
    pub tau_v: f64,
}

type Vec9 = [f64; 9];

impl PlantState {
    fn to_array(self) -> Vec9 {
        [
            self.x,
            self.y,
            self.psi,
            self.vx,
            self.vy,
            self.yaw_rate,
            self.gamma_act,
            self.beta_act,
            self.tau_act,
        ]
    }

    fn from_array(a: Vec9) -> Self {
        Self {
            x: a[0],
            y: a[1],
            psi: a[2],
            vx: a[3],
            vy: a[4],
            yaw_rate: a[5],
            gamma_act: a[6],
            beta_act: a[7],
            tau_act: a[8],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn kinetic_energy(&self, p: &PlantParams) -> f64 {
        0.5 * p.mass * (self.vx * self.vx + self.vy * self.vy)
            + 0.5 * p.yaw_inertia * self.yaw_rate * self.yaw_rate
    }
}

/// Body-frame accelerations `(vx_dot, vy_dot, r_dot)` at the current actuator states.
pub fn plant_accelerations(p: &PlantParams, s: &PlantState) -> (f64, f64, f64) {
    let acc = body_accelerations(
        p,
        &[s.vx, s.vy, s.yaw_rate, s.gamma_act, s.beta_act, s.tau_act],
    );
    let front = axle_forces(p, s.vx, s.vy, s.yaw_rate, s.gamma_act, s.beta_act).front;
    let vx_dot = if p.ideal_longitudinal {
        s.gamma_act - p.drag * s.vx * s.vx.abs()
    } else {
        s.gamma_act - front * s.beta_act.sin() / p.mass + s.yaw_rate * s.vy
            - p.drag * s.vx * s.vx.abs()
    };
    (vx_dot, acc.lateral, acc.yaw)
}

fn lag_rate(cmd: f64, act: f64, tc: f64) -> f64 {
    if tc > 0.0 {
        (cmd - act) / tc
    } else {
        0.0
    }
}

fn plant_rhs(p: &PlantParams, a: &Vec9, c: &Commands) -> Vec9 {
    let s = PlantState::from_array(*a);
    let (sp, cp) = s.psi.sin_cos();
    let (vx_dot, vy_dot, r_dot) = plant_accelerations(p, &s);
    [
        s.vx * cp - s.vy * sp,
        s.vx * sp + s.vy * cp,
        s.yaw_rate,
        vx_dot,
        vy_dot,
        r_dot,
        lag_rate(c.gamma, s.gamma_act, p.lag_gamma),
        lag_rate(c.beta, s.beta_act, p.lag_beta),
        lag_rate(c.tau_v, s.tau_act, p.lag_tau),
    ]
}

/// Advances the plant by `dt` seconds with the commands held.
pub fn plant_step(
    state: &PlantState,
    commands: &Commands,
    params: &PlantParams,
    dt: f64,
) -> Result<PlantState> {
    if !(dt > 0.0 && dt <= MAX_PLANT_DT) {
        return Err(Error::invalid(format!(
            "plant step {dt} outside (0, {MAX_PLANT_DT}]"
        )));
    }
    if state.vx <= STALL_SPEED {
        return Err(Error::PlantStall { vx: state.vx });
    }
    let mut s = *state;
    // lag-free actuators follow the command directly
    if params.lag_gamma == 0.0 {
        s.gamma_act = commands.gamma;
    }
    if params.lag_beta == 0.0 {
        s.beta_act = commands.beta;
    }
    if params.lag_tau == 0.0 {
        s.tau_act = commands.tau_v;
    }
    let x0 = s.to_array();
    let add = |a: &Vec9, k: &Vec9, h: f64| -> Vec9 { std::array::from_fn(|i| a[i] + h * k[i]) };
    let k1 = plant_rhs(params, &x0, commands);
    let k2 = plant_rhs(params, &add(&x0, &k1, 0.5 * dt), commands);
    let k3 = plant_rhs(params, &add(&x0, &k2, 0.5 * dt), commands);
    let k4 = plant_rhs(params, &add(&x0, &k3, dt), commands);
    let next: Vec9 =
        std::array::from_fn(|i| x0[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
    let out = PlantState::from_array(next);
    if !out.is_finite() {
        return Err(Error::numerical("plant state became non-finite"));
    }
    Ok(out)
}

/// Curvilinear coordinates of the plant pose.
pub fn global_to_frenet(state: &PlantState, track: &Track) -> Result<FrenetPose> {
    track.global_to_frenet(state.x, state.y, state.psi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moving(vx: f64) -> PlantState {
        PlantState {
            vx,
            ..Default::default()
        }
    }

    #[test]
    fn coasting_stays_straight() {
        let p = PlantParams::default();
        let mut s = moving(5.0);
        for _ in 0..200 {
            s = plant_step(&s, &Commands::default(), &p, 0.005).unwrap();
        }
        assert_eq!(s.y, 0.0);
        assert_eq!(s.psi, 0.0);
        assert!((s.x - 5.0).abs() < 1e-12);
    }

    #[test]
    fn stall_and_step_checks() {
        let p = PlantParams::default();
        assert!(matches!(
            plant_step(&moving(0.05), &Commands::default(), &p, 0.005),
            Err(Error::PlantStall { .. })
        ));
        assert!(plant_step(&moving(5.0), &Commands::default(), &p, 0.05).is_err());
    }

    #[test]
    fn nominal_gradient_matches_differences() {
        let p = PlantParams::default();
        let x = [6.0, -0.3, 0.4, 1.2, 0.08, 0.3];
        let e = body_accelerations(&p, &x);
        for k in 0..6 {
            let h = 1e-6;
            let mut a = x;
            let mut b = x;
            a[k] += h;
            b[k] -= h;
            let (ea, eb) = (body_accelerations(&p, &a), body_accelerations(&p, &b));
            let gl = (ea.lateral - eb.lateral) / (2.0 * h);
            let gy = (ea.yaw - eb.yaw) / (2.0 * h);
            assert!(
                (gl - e.d_lateral[k]).abs() <= 1e-5 * (1.0 + gl.abs()),
                "lat {k}"
            );
            assert!(
                (gy - e.d_yaw[k]).abs() <= 1e-5 * (1.0 + gy.abs()),
                "yaw {k}"
            );
        }
    }
}
