//! Optimal control problem: cost residuals, path constraints, multiple-shooting transcription
//! on a non-uniform spatial grid and Gauss-Newton linearization into a [`QpProblem`].

use std::f64::consts::FRAC_PI_2;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    idx, integrate_interval, sensitivities, AccelerationModel, ControlVec, StateVec, NU, NX,
};
use crate::error::{Error, Result};
use crate::qp::{QpProblem, QpStage, QpTerminal};
use crate::track::Track;

pub const NR_STAGE: usize = 10;
pub const NR_TERMINAL: usize = 6;
pub const NH_STAGE: usize = 4;
pub const NH_TERMINAL: usize = 3;

pub const DEFAULT_GRID: [usize; 33] = [
    1, 2, 3, 4, 5, 6, 8, 10, 12, 14, 16, 18, 20, 23, 26, 29, 32, 35, 38, 41, 44, 47, 50, 53, 56,
    59, 62, 65, 68, 71, 74, 77, 80,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcpConfig {
    /// Number of integration cells in the horizon.
    pub horizon_cells: usize,
    /// Cell length, m.
    pub ts: f64,
    /// Shooting nodes as 1-based cell indices; node `k` sits `(grid[k] - 1) * ts` ahead.
    pub grid: Vec<usize>,
    /// Weights of `[gamma_rate, tau_v_rate, beta_rate, eta]`.
    pub stage_weights: [f64; NH_STAGE],
    /// Weights of `[t, e_theta - ref, e_y - ref]`.
    pub terminal_weights: [f64; NH_TERMINAL],
    /// Bounds of the stage rows `[vx, e_theta, gamma, beta, tau_v, gamma_rate, tau_v_rate,
    /// beta_rate, eta]`; the final `e_y + eta` row is bounded by the track.
    pub stage_lower: [f64; NR_STAGE - 1],
    pub stage_upper: [f64; NR_STAGE - 1],
    /// Bounds of the terminal rows `[vx, e_theta, gamma, beta, tau_v]`.
    pub terminal_lower: [f64; NR_TERMINAL - 1],
    pub terminal_upper: [f64; NR_TERMINAL - 1],
    /// Inset applied to both track half-widths, m.
    pub bound_reduction: f64,
    pub terminal_ref_e_theta: f64,
    pub terminal_ref_e_y: f64,
    pub regularization: f64,
    /// Curvature-dependent tightening of the `vx` upper bound; `None` keeps the fixed bound.
    pub speed_envelope: Option<SpeedEnvelope>,
}

/// Speed profile `min(vx_max, sqrt(a_lat / |curvature|))`, propagated backwards with a
/// constant deceleration so that every capped speed is reachable from the one before it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeedEnvelope {
    /// Admissible lateral acceleration, m/s^2.
    pub lateral_accel: f64,
    /// Deceleration used for the backward propagation, m/s^2.
    pub braking: f64,
    /// Sampling step of the look-ahead, m.
    pub step: f64,
}

impl Default for SpeedEnvelope {
    fn default() -> Self {
        Self {
            lateral_accel: 6.0,
            braking: 3.0,
            step: 0.5,
        }
    }
}

impl Default for OcpConfig {
    fn default() -> Self {
        let lower = [
            2.5, -FRAC_PI_2, -4.2, -FRAC_PI_2, -1.7, -1e3, -1e2, -1e1, -5.0,
        ];
        let upper = [15.0, FRAC_PI_2, 2.0, FRAC_PI_2, 1.7, 1e3, 1e2, 1e1, 5.0];
        Self {
            horizon_cells: 80,
            ts: 0.3,
            grid: DEFAULT_GRID.to_vec(),
            stage_weights: [2e-3, 5e-2, 1e-2, 5e1],
            terminal_weights: [1e-1, 1e3, 1e2],
            stage_lower: lower,
            stage_upper: upper,
            terminal_lower: [lower[0], lower[1], lower[2], lower[3], lower[4]],
            terminal_upper: [upper[0], upper[1], upper[2], upper[3], upper[4]],
            bound_reduction: 0.5,
            terminal_ref_e_theta: 0.0,
            terminal_ref_e_y: 0.0,
            regularization: 1e-8,
            speed_envelope: Some(SpeedEnvelope::default()),
        }
    }
}

impl OcpConfig {
    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if g.len() < 2 || g[0] != 1 || *g.last().unwrap() != self.horizon_cells {
            return Err(Error::invalid(
                "grid must start at 1 and end at the horizon length",
            ));
        }
        if g.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("grid must be strictly increasing"));
        }
        if !(self.ts > 0.0) {
            return Err(Error::invalid("cell length must be positive"));
        }
        let weights = self.stage_weights.iter().chain(&self.terminal_weights);
        if weights.clone().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::invalid("weights must be non-negative"));
        }
        let pairs = self
            .stage_lower
            .iter()
            .zip(&self.stage_upper)
            .chain(self.terminal_lower.iter().zip(&self.terminal_upper));
        if pairs.clone().any(|(l, u)| !(l <= u)) {
            return Err(Error::invalid("lower bounds must not exceed upper bounds"));
        }
        if !(self.bound_reduction >= 0.0 && self.regularization >= 0.0) {
            return Err(Error::invalid(
                "reduction and regularization must be non-negative",
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(&fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn n_nodes(&self) -> usize {
        self.grid.len()
    }

    pub fn n_intervals(&self) -> usize {
        self.grid.len() - 1
    }

    /// Distance of each node ahead of the first one, m.
    pub fn node_offsets(&self) -> Vec<f64> {
        self.grid
            .iter()
            .map(|&g| (g - 1) as f64 * self.ts)
            .collect()
    }

    /// RK4 substeps on interval `j`: one per cell.
    pub fn substeps(&self, j: usize) -> usize {
        self.grid[j + 1] - self.grid[j]
    }
}

/// Primal iterate of the multiple-shooting problem.
#[derive(Debug, Clone, PartialEq)]
pub struct NlpIterate {
    /// Unwrapped track abscissa of each node, m.
    pub s: Vec<f64>,
    pub x: Vec<StateVec>,
    pub u: Vec<ControlVec>,
    /// Measured state embedded at the first node.
    pub x0: StateVec,
}

impl NlpIterate {
    pub fn validate(&self, config: &OcpConfig) -> Result<()> {
        let n = config.n_nodes();
        if self.s.len() != n || self.x.len() != n || self.u.len() != n - 1 {
            return Err(Error::invalid("iterate dimensions do not match the grid"));
        }
        let finite = self.s.iter().all(|v| v.is_finite())
            && self.x.iter().all(|x| x.iter().all(|v| v.is_finite()))
            && self.u.iter().all(|u| u.iter().all(|v| v.is_finite()))
            && self.x0.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::numerical("iterate contains non-finite values"));
        }
        Ok(())
    }
}

pub type StageResidual = SVector<f64, NH_STAGE>;
pub type TerminalResidual = SVector<f64, NH_TERMINAL>;

/// `[gamma_rate, tau_v_rate, beta_rate, eta]`.
pub fn stage_residual(_x: &StateVec, u: &ControlVec) -> StageResidual {
    StageResidual::from([
        u[idx::GAMMA_RATE],
        u[idx::TAU_RATE],
        u[idx::BETA_RATE],
        u[idx::ETA],
    ])
}

/// `[t, e_theta - ref_e_theta, e_y - ref_e_y]`.
pub fn terminal_residual(x: &StateVec, ref_e_theta: f64, ref_e_y: f64) -> TerminalResidual {
    TerminalResidual::from([
        x[idx::T],
        x[idx::ETHETA] - ref_e_theta,
        x[idx::EY] - ref_e_y,
    ])
}

/// Jacobian of [`stage_residual`] with respect to `[x; u]`.
pub fn stage_residual_jacobian() -> SMatrix<f64, NH_STAGE, { NX + NU }> {
    let mut j = SMatrix::<f64, NH_STAGE, { NX + NU }>::zeros();
    j[(0, NX + idx::GAMMA_RATE)] = 1.0;
    j[(1, NX + idx::TAU_RATE)] = 1.0;
    j[(2, NX + idx::BETA_RATE)] = 1.0;
    j[(3, NX + idx::ETA)] = 1.0;
    j
}

pub fn terminal_residual_jacobian() -> SMatrix<f64, NH_TERMINAL, NX> {
    let mut j = SMatrix::<f64, NH_TERMINAL, NX>::zeros();
    j[(0, idx::T)] = 1.0;
    j[(1, idx::ETHETA)] = 1.0;
    j[(2, idx::EY)] = 1.0;
    j
}

pub fn stage_cost(config: &OcpConfig, x: &StateVec, u: &ControlVec) -> f64 {
    let h = stage_residual(x, u);
    0.5 * (0..NH_STAGE)
        .map(|i| config.stage_weights[i] * h[i] * h[i])
        .sum::<f64>()
}

pub fn terminal_cost(config: &OcpConfig, x: &StateVec) -> f64 {
    let h = terminal_residual(x, config.terminal_ref_e_theta, config.terminal_ref_e_y);
    0.5 * (0..NH_TERMINAL)
        .map(|i| config.terminal_weights[i] * h[i] * h[i])
        .sum::<f64>()
}

/// Stage rows `[vx, e_theta, gamma, beta, tau_v, gamma_rate, tau_v_rate, beta_rate, eta,
/// e_y + eta]`.
pub fn stage_constraints(x: &StateVec, u: &ControlVec) -> SVector<f64, NR_STAGE> {
    let (c, d) = stage_constraint_jacobians();
    c * x + d * u
}

/// Terminal rows `[vx, e_theta, gamma, beta, tau_v, e_y + eta]`, with `eta` from the last
/// interval.
pub fn terminal_constraints(x: &StateVec, u_last: &ControlVec) -> SVector<f64, NR_TERMINAL> {
    let (c, d) = terminal_constraint_jacobians();
    c * x + d * u_last
}

pub fn stage_constraint_jacobians() -> (SMatrix<f64, NR_STAGE, NX>, SMatrix<f64, NR_STAGE, NU>) {
    let mut c = SMatrix::<f64, NR_STAGE, NX>::zeros();
    let mut d = SMatrix::<f64, NR_STAGE, NU>::zeros();
    for (row, slot) in [idx::VX, idx::ETHETA, idx::GAMMA, idx::BETA, idx::TAU]
        .into_iter()
        .enumerate()
    {
        c[(row, slot)] = 1.0;
    }
    d[(5, idx::GAMMA_RATE)] = 1.0;
    d[(6, idx::TAU_RATE)] = 1.0;
    d[(7, idx::BETA_RATE)] = 1.0;
    d[(8, idx::ETA)] = 1.0;
    c[(9, idx::EY)] = 1.0;
    d[(9, idx::ETA)] = 1.0;
    (c, d)
}

pub fn terminal_constraint_jacobians(
) -> (SMatrix<f64, NR_TERMINAL, NX>, SMatrix<f64, NR_TERMINAL, NU>) {
    let mut c = SMatrix::<f64, NR_TERMINAL, NX>::zeros();
    let mut d = SMatrix::<f64, NR_TERMINAL, NU>::zeros();
    for (row, slot) in [idx::VX, idx::ETHETA, idx::GAMMA, idx::BETA, idx::TAU]
        .into_iter()
        .enumerate()
    {
        c[(row, slot)] = 1.0;
    }
    c[(5, idx::EY)] = 1.0;
    d[(5, idx::ETA)] = 1.0;
    (c, d)
}

/// Lateral bounds at `s` after the inset.
pub fn reduced_bounds(config: &OcpConfig, track: &Track, s: f64) -> Result<(f64, f64)> {
    let (lb, ub) = track.bounds_at(s)?;
    Ok((lb + config.bound_reduction, ub - config.bound_reduction))
}

/// Envelope speed at `s`, never below the `vx` lower bound.
pub fn speed_cap(config: &OcpConfig, track: &Track, s: f64) -> Result<f64> {
    let v_max = config.stage_upper[0];
    let Some(env) = config.speed_envelope else {
        return Ok(v_max);
    };
    let horizon = v_max * v_max / (2.0 * env.braking);
    let n = (horizon / env.step).ceil() as usize;
    let mut cap = v_max;
    for k in 0..=n {
        let d = k as f64 * env.step;
        let zeta = track.curvature_at(s + d)?.abs();
        if zeta > 0.0 {
            let v = (env.lateral_accel / zeta + 2.0 * env.braking * d).sqrt();
            cap = cap.min(v);
        }
    }
    Ok(cap.max(config.stage_lower[0]))
}

fn node_stage_bounds(
    config: &OcpConfig,
    track: &Track,
    s: f64,
    first_node: bool,
) -> Result<(SVector<f64, NR_STAGE>, SVector<f64, NR_STAGE>)> {
    let (lb, mut ub) = stage_bounds(config, reduced_bounds(config, track, s)?, first_node);
    if !first_node {
        ub[0] = ub[0].min(speed_cap(config, track, s)?);
    }
    Ok((lb, ub))
}

fn node_terminal_bounds(
    config: &OcpConfig,
    track: &Track,
    s: f64,
) -> Result<(SVector<f64, NR_TERMINAL>, SVector<f64, NR_TERMINAL>)> {
    let (lb, mut ub) = terminal_bounds(config, reduced_bounds(config, track, s)?);
    ub[0] = ub[0].min(speed_cap(config, track, s)?);
    Ok((lb, ub))
}

/// Stage row bounds at a node. The first node keeps only rows that involve a control.
pub fn stage_bounds(
    config: &OcpConfig,
    e_y_bounds: (f64, f64),
    first_node: bool,
) -> (SVector<f64, NR_STAGE>, SVector<f64, NR_STAGE>) {
    let mut lb = SVector::<f64, NR_STAGE>::zeros();
    let mut ub = SVector::<f64, NR_STAGE>::zeros();
    for i in 0..NR_STAGE - 1 {
        lb[i] = config.stage_lower[i];
        ub[i] = config.stage_upper[i];
    }
    lb[9] = e_y_bounds.0;
    ub[9] = e_y_bounds.1;
    if first_node {
        for i in 0..5 {
            lb[i] = f64::NEG_INFINITY;
            ub[i] = f64::INFINITY;
        }
    }
    (lb, ub)
}

pub fn terminal_bounds(
    config: &OcpConfig,
    e_y_bounds: (f64, f64),
) -> (SVector<f64, NR_TERMINAL>, SVector<f64, NR_TERMINAL>) {
    let mut lb = SVector::<f64, NR_TERMINAL>::zeros();
    let mut ub = SVector::<f64, NR_TERMINAL>::zeros();
    for i in 0..NR_TERMINAL - 1 {
        lb[i] = config.terminal_lower[i];
        ub[i] = config.terminal_upper[i];
    }
    lb[5] = e_y_bounds.0;
    ub[5] = e_y_bounds.1;
    (lb, ub)
}

fn check_models(config: &OcpConfig, models: &[&dyn AccelerationModel]) -> Result<()> {
    if models.len() != config.n_intervals() {
        return Err(Error::invalid(format!(
            "expected {} interval models, got {}",
            config.n_intervals(),
            models.len()
        )));
    }
    Ok(())
}

/// Continuity defects `phi(x_j, u_j) - x_{j+1}`.
pub fn transcribe(
    config: &OcpConfig,
    track: &Track,
    models: &[&dyn AccelerationModel],
    it: &NlpIterate,
) -> Result<Vec<StateVec>> {
    it.validate(config)?;
    check_models(config, models)?;
    (0..config.n_intervals())
        .map(|j| {
            let end = integrate_interval(
                &it.x[j],
                &it.u[j],
                it.s[j],
                it.s[j + 1],
                models[j],
                track,
                config.substeps(j),
            )?;
            Ok(end - it.x[j + 1])
        })
        .collect()
}

/// NLP objective at an iterate.
pub fn objective(config: &OcpConfig, it: &NlpIterate) -> f64 {
    let stages: f64 = (0..config.n_intervals())
        .map(|j| stage_cost(config, &it.x[j], &it.u[j]))
        .sum();
    stages + terminal_cost(config, it.x.last().unwrap())
}

/// Total constraint violation (l1) of an iterate: embedding, continuity and inequality rows.
pub fn constraint_violation(
    config: &OcpConfig,
    track: &Track,
    models: &[&dyn AccelerationModel],
    it: &NlpIterate,
) -> Result<f64> {
    let defects = transcribe(config, track, models, it)?;
    let mut v: f64 = (it.x0 - it.x[0]).abs().sum();
    v += defects.iter().map(|d| d.abs().sum()).sum::<f64>();
    let m = config.n_intervals();
    for j in 0..m {
        let (lb, ub) = node_stage_bounds(config, track, it.s[j], j == 0)?;
        let r = stage_constraints(&it.x[j], &it.u[j]);
        for i in 0..NR_STAGE {
            v += (lb[i] - r[i]).max(0.0) + (r[i] - ub[i]).max(0.0);
        }
    }
    let (lb, ub) = node_terminal_bounds(config, track, it.s[m])?;
    let r = terminal_constraints(&it.x[m], &it.u[m - 1]);
    for i in 0..NR_TERMINAL {
        v += (lb[i] - r[i]).max(0.0) + (r[i] - ub[i]).max(0.0);
    }
    Ok(v)
}

fn to_dmatrix<const R: usize, const C: usize>(m: &SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, C, m.as_slice())
}

fn to_dvector<const R: usize>(v: &SVector<f64, R>) -> DVector<f64> {
    DVector::from_column_slice(v.as_slice())
}

/// Gauss-Newton QP of the NLP at `it`, with `models[j]` used on interval `j`.
pub fn linearize(
    config: &OcpConfig,
    track: &Track,
    models: &[&dyn AccelerationModel],
    it: &NlpIterate,
) -> Result<QpProblem> {
    it.validate(config)?;
    check_models(config, models)?;
    let m = config.n_intervals();
    let jh = stage_residual_jacobian();
    let w = SMatrix::<f64, NH_STAGE, NH_STAGE>::from_diagonal(&SVector::from(config.stage_weights));
    let reg = SMatrix::<f64, { NX + NU }, { NX + NU }>::identity() * config.regularization;
    let h_stage = jh.transpose() * w * jh + reg;
    let (cs, ds) = stage_constraint_jacobians();
    let mut stages = Vec::with_capacity(m);
    for j in 0..m {
        let (x, u) = (&it.x[j], &it.u[j]);
        let (end, a, b) = sensitivities(
            x,
            u,
            it.s[j],
            it.s[j + 1],
            models[j],
            track,
            config.substeps(j),
        )?;
        let g = jh.transpose() * w * stage_residual(x, u);
        let (lb, ub) = node_stage_bounds(config, track, it.s[j], j == 0)?;
        let r = stage_constraints(x, u);
        stages.push(QpStage {
            h: to_dmatrix(&h_stage),
            g: to_dvector(&g),
            a_mat: to_dmatrix(&a),
            b_mat: to_dmatrix(&b),
            a_vec: to_dvector(&(end - it.x[j + 1])),
            c_mat: to_dmatrix(&cs),
            d_mat: to_dmatrix(&ds),
            lb: to_dvector(&(lb - r)),
            ub: to_dvector(&(ub - r)),
        });
    }
    let jn = terminal_residual_jacobian();
    let wn = SMatrix::<f64, NH_TERMINAL, NH_TERMINAL>::from_diagonal(&SVector::from(
        config.terminal_weights,
    ));
    let xn = &it.x[m];
    let hn = jn.transpose() * wn * jn + SMatrix::<f64, NX, NX>::identity() * config.regularization;
    let gn = jn.transpose()
        * wn
        * terminal_residual(xn, config.terminal_ref_e_theta, config.terminal_ref_e_y);
    let (ct, dt) = terminal_constraint_jacobians();
    let (lb, ub) = node_terminal_bounds(config, track, it.s[m])?;
    let r = terminal_constraints(xn, &it.u[m - 1]);
    Ok(QpProblem {
        nx: NX,
        nu: NU,
        stages,
        terminal: QpTerminal {
            h: to_dmatrix(&hn),
            g: to_dvector(&gn),
            c_mat: to_dmatrix(&ct),
            d_mat: to_dmatrix(&dt),
            lb: to_dvector(&(lb - r)),
            ub: to_dvector(&(ub - r)),
        },
        dx0: to_dvector(&(it.x0 - it.x[0])),
    })
}
