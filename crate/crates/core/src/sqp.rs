//! The predictive controller: one Gauss-Newton SQP iteration per control step (real-time
//! iteration) with warm-start shifting along the track, and a fully converged SQP mode with an
//! l1-merit line search for offline use.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dynamics::{
    gp_input_from_state, idx, AccelerationModel, ControlVec, GpAccelerations, GpChannel, StateVec,
    VehicleState,
};
use crate::error::{Error, Result};
use crate::ocp::{constraint_violation, linearize, objective, NlpIterate, OcpConfig};
use crate::plant::{Commands, NominalModel};
use crate::qp::{self, kkt_residuals, KktResiduals, QpProblem, QpSettings, QpSolution, QpStatus};
use crate::reduce::{SparseGp, DEFAULT_NN_LATERAL, DEFAULT_NN_YAW};
use crate::track::Track;

pub const DEFAULT_CONTROL_RATE: f64 = 20.0;
pub const DEFAULT_FAILURE_BUDGET: usize = 5;

/// Source of the per-interval acceleration models.
#[derive(Clone)]
pub enum PredictionModel {
    Nominal(NominalModel),
    BlackBox {
        lateral: Arc<SparseGp>,
        yaw: Arc<SparseGp>,
        t_nn_lateral: usize,
        t_nn_yaw: usize,
    },
    Fixed(Arc<dyn AccelerationModel>),
}

impl std::fmt::Debug for PredictionModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PredictionModel::Nominal(_) => f.write_str("Nominal"),
            PredictionModel::BlackBox {
                t_nn_lateral,
                t_nn_yaw,
                ..
            } => write!(f, "BlackBox(t_nn = {t_nn_lateral}/{t_nn_yaw})"),
            PredictionModel::Fixed(_) => f.write_str("Fixed"),
        }
    }
}

impl PredictionModel {
    pub fn black_box(lateral: Arc<SparseGp>, yaw: Arc<SparseGp>) -> Self {
        PredictionModel::BlackBox {
            lateral,
            yaw,
            t_nn_lateral: DEFAULT_NN_LATERAL,
            t_nn_yaw: DEFAULT_NN_YAW,
        }
    }

    /// One model per interval, selected at the interval start states.
    pub fn interval_models(&self, nodes: &[StateVec]) -> Result<Vec<Arc<dyn AccelerationModel>>> {
        match self {
            PredictionModel::Nominal(m) => {
                let shared: Arc<dyn AccelerationModel> = Arc::new(*m);
                Ok(vec![shared; nodes.len()])
            }
            PredictionModel::Fixed(m) => Ok(vec![Arc::clone(m); nodes.len()]),
            PredictionModel::BlackBox {
                lateral,
                yaw,
                t_nn_lateral,
                t_nn_yaw,
            } => {
                let anchors: Vec<Vec<f64>> = nodes
                    .iter()
                    .map(|x| gp_input_from_state(x).to_vec())
                    .collect();
                let lat = lateral.select_along_horizon(&anchors, *t_nn_lateral)?;
                let yw = yaw.select_along_horizon(&anchors, *t_nn_yaw)?;
                lat.into_iter()
                    .zip(yw)
                    .map(|(l, y)| {
                        let m = GpAccelerations::new(GpChannel::Local(l), GpChannel::Local(y))?;
                        Ok(Arc::new(m) as Arc<dyn AccelerationModel>)
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SqpMode {
    Rti,
    Converged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SqpSettings {
    pub mode: SqpMode,
    pub max_iter: usize,
    pub tol: f64,
    pub armijo_c: f64,
    pub min_step: f64,
    pub qp: QpSettings,
}

impl Default for SqpSettings {
    fn default() -> Self {
        Self {
            mode: SqpMode::Rti,
            max_iter: 1,
            tol: 1e-6,
            armijo_c: 1e-4,
            min_step: 1.0 / 1024.0,
            qp: QpSettings::default(),
        }
    }
}

impl SqpSettings {
    pub fn converged() -> Self {
        Self {
            mode: SqpMode::Converged,
            max_iter: 100,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ControllerConfig {
    pub ocp: OcpConfig,
    pub qp: QpSettings,
    /// Control rate, Hz.
    pub rate: f64,
    pub failure_budget: usize,
    pub t_nn_lateral: usize,
    pub t_nn_yaw: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            ocp: OcpConfig::default(),
            qp: QpSettings::default(),
            rate: DEFAULT_CONTROL_RATE,
            failure_budget: DEFAULT_FAILURE_BUDGET,
            t_nn_lateral: DEFAULT_NN_LATERAL,
            t_nn_yaw: DEFAULT_NN_YAW,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepOutcome {
    Ok,
    /// QP failed; previous commands reused.
    Degraded,
    /// Failure budget exhausted or model singular; braking straight.
    SafeStop,
}

/// Per-step controller diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub solve_time_ms: f64,
    pub kkt: KktResiduals,
    pub qp_iters: usize,
    pub qp_status: Option<QpStatus>,
    pub outcome: StepOutcome,
    pub cold_started: bool,
    /// Slack of the first interval after the update.
    pub eta: f64,
    /// Terminal lateral offset and slack after the update.
    pub e_y_terminal: f64,
    pub eta_terminal: f64,
    /// Predicted state one control period ahead.
    pub predicted_next: Option<StateVec>,
    pub message: Option<String>,
}

/// Linear interpolation of the trajectory at time `t` (node times from the `t` state).
pub fn sample_at_time(it: &NlpIterate, t: f64) -> StateVec {
    let xs = &it.x;
    if t <= xs[0][idx::T] {
        return xs[0];
    }
    for w in xs.windows(2) {
        let (t0, t1) = (w[0][idx::T], w[1][idx::T]);
        if t <= t1 && t1 > t0 {
            let f = (t - t0) / (t1 - t0);
            return w[0] * (1.0 - f) + w[1] * f;
        }
    }
    *xs.last().unwrap()
}

/// Constant-speed centerline initialization with zero controls.
pub fn cold_start(
    measured: &VehicleState,
    s_now: f64,
    track: &Track,
    config: &OcpConfig,
) -> Result<NlpIterate> {
    let lo = config.stage_lower[0];
    let hi = config.stage_upper[0];
    let vx = if measured.vx.is_finite() {
        measured.vx.clamp(lo, hi)
    } else {
        lo
    };
    let offsets = config.node_offsets();
    let mut s = Vec::with_capacity(offsets.len());
    let mut x = Vec::with_capacity(offsets.len());
    for off in offsets {
        let sj = s_now + off;
        let mut xj = StateVec::zeros();
        xj[idx::VX] = vx;
        xj[idx::R] = vx * track.curvature_at(sj)?;
        xj[idx::T] = off / vx;
        s.push(sj);
        x.push(xj);
    }
    let mut x0 = measured.to_vector();
    x0[idx::T] = 0.0;
    Ok(NlpIterate {
        s,
        u: vec![ControlVec::zeros(); config.n_intervals()],
        x,
        x0,
    })
}

fn lerp_at<T>(s_old: &[f64], vals: &[T], s: f64) -> T
where
    T: Copy + std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T>,
{
    if s <= s_old[0] {
        return vals[0];
    }
    let last = vals.len() - 1;
    if s >= s_old[last] {
        return vals[last];
    }
    let k = s_old.partition_point(|&v| v <= s) - 1;
    let f = (s - s_old[k]) / (s_old[k + 1] - s_old[k]);
    vals[k] * (1.0 - f) + vals[k + 1] * f
}

/// Re-anchors an iterate at `s_now`, interpolating linearly in `s` and holding the tail.
/// Returns `None` when the track position jumped backwards by more than half a lap.
pub fn warm_start_shift(
    it: &NlpIterate,
    s_now: f64,
    config: &OcpConfig,
    track_length: f64,
) -> Option<NlpIterate> {
    if s_now < it.s[0] - 0.5 * track_length {
        return None;
    }
    let m = config.n_intervals();
    let s: Vec<f64> = config.node_offsets().iter().map(|o| s_now + o).collect();
    let mut x: Vec<StateVec> = s.iter().map(|&sj| lerp_at(&it.s, &it.x, sj)).collect();
    let t0 = x[0][idx::T];
    for xj in &mut x {
        xj[idx::T] -= t0;
    }
    let u = s[..m]
        .iter()
        .map(|&sj| lerp_at(&it.s[..m], &it.u, sj))
        .collect();
    Some(NlpIterate { s, x, u, x0: it.x0 })
}

fn apply_step(it: &mut NlpIterate, sol: &QpSolution, alpha: f64) {
    for (x, dx) in it.x.iter_mut().zip(&sol.dx) {
        for i in 0..x.len() {
            x[i] += alpha * dx[i];
        }
    }
    for (u, du) in it.u.iter_mut().zip(&sol.du) {
        for i in 0..u.len() {
            u[i] += alpha * du[i];
        }
    }
}

fn step_norm(sol: &QpSolution) -> f64 {
    sol.dx
        .iter()
        .chain(&sol.du)
        .map(|v| v.amax())
        .fold(0.0, f64::max)
}

fn max_multiplier(sol: &QpSolution) -> f64 {
    sol.lambda
        .iter()
        .chain(&sol.mu)
        .chain(std::iter::once(&sol.lambda_init))
        .chain(std::iter::once(&sol.mu_terminal))
        .map(|v| v.amax())
        .fold(0.0, f64::max)
}

fn model_refs(models: &[Arc<dyn AccelerationModel>]) -> Vec<&dyn AccelerationModel> {
    models.iter().map(|m| m.as_ref()).collect()
}

/// Outcome of a converged SQP solve.
#[derive(Debug, Clone, PartialEq)]
pub struct SqpReport {
    pub iterations: usize,
    pub converged: bool,
    pub last_step: f64,
    pub kkt: KktResiduals,
    pub objective: f64,
    pub violation: f64,
}

/// Gradient of the Gauss-Newton objective along a QP step.
fn directional_derivative(qp: &QpProblem, sol: &QpSolution) -> f64 {
    let mut d = 0.0;
    for (j, st) in qp.stages.iter().enumerate() {
        let nx = qp.nx;
        d += st.g.rows(0, nx).dot(&sol.dx[j]) + st.g.rows(nx, qp.nu).dot(&sol.du[j]);
    }
    d + qp.terminal.g.dot(&sol.dx[qp.horizon()])
}

/// Runs SQP iterations with an Armijo line search on the l1 merit function, models held fixed.
pub fn sqp_solve(
    config: &OcpConfig,
    track: &Track,
    models: &[Arc<dyn AccelerationModel>],
    start: &NlpIterate,
    settings: &SqpSettings,
) -> Result<(NlpIterate, SqpReport)> {
    if settings.max_iter == 0 {
        return Err(Error::invalid("at least one SQP iteration required"));
    }
    let refs = model_refs(models);
    let mut it = start.clone();
    let mut penalty: f64 = 1.0;
    let mut report = SqpReport {
        iterations: 0,
        converged: false,
        last_step: f64::INFINITY,
        kkt: KktResiduals::default(),
        objective: objective(config, &it),
        violation: constraint_violation(config, track, &refs, &it)?,
    };
    for k in 0..settings.max_iter {
        let qp_problem = linearize(config, track, &refs, &it)?;
        let sol = qp::solve(&qp_problem, &settings.qp)?;
        report.iterations = k + 1;
        if sol.status != QpStatus::Optimal {
            return Ok((it, report));
        }
        report.kkt = kkt_residuals(&qp_problem, &sol);
        let step = step_norm(&sol);
        report.last_step = step;
        if step <= settings.tol && report.kkt.stationarity <= settings.tol {
            report.converged = true;
            return Ok((it, report));
        }
        penalty = penalty.max(1.1 * max_multiplier(&sol) + 1.0);
        let f0 = objective(config, &it);
        let v0 = constraint_violation(config, track, &refs, &it)?;
        let phi0 = f0 + penalty * v0;
        let slope = directional_derivative(&qp_problem, &sol) - penalty * v0;
        let mut alpha = 1.0;
        loop {
            let mut trial = it.clone();
            apply_step(&mut trial, &sol, alpha);
            let accepted = match constraint_violation(config, track, &refs, &trial) {
                Ok(v) => {
                    let phi = objective(config, &trial) + penalty * v;
                    phi <= phi0 + settings.armijo_c * alpha * slope.min(0.0)
                }
                Err(Error::Singularity(_)) => false,
                Err(e) => return Err(e),
            };
            if accepted || alpha <= settings.min_step {
                it = trial;
                break;
            }
            alpha *= 0.5;
        }
        report.objective = objective(config, &it);
        report.violation = constraint_violation(config, track, &refs, &it)?;
    }
    Ok((it, report))
}

/// Closed-loop controller state.
pub struct Controller {
    config: ControllerConfig,
    model: PredictionModel,
    track: Arc<Track>,
    iterate: Option<NlpIterate>,
    last_commands: Commands,
    consecutive_failures: usize,
    last_models: Vec<Arc<dyn AccelerationModel>>,
}

impl Controller {
    pub fn new(
        config: ControllerConfig,
        model: PredictionModel,
        track: Arc<Track>,
    ) -> Result<Self> {
        config.ocp.validate()?;
        if !(config.rate > 0.0) {
            return Err(Error::invalid("control rate must be positive"));
        }
        let model = match model {
            PredictionModel::BlackBox { lateral, yaw, .. } => PredictionModel::BlackBox {
                lateral,
                yaw,
                t_nn_lateral: config.t_nn_lateral,
                t_nn_yaw: config.t_nn_yaw,
            },
            other => other,
        };
        Ok(Self {
            config,
            model,
            track,
            iterate: None,
            last_commands: Commands::default(),
            consecutive_failures: 0,
            last_models: Vec::new(),
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn iterate(&self) -> Option<&NlpIterate> {
        self.iterate.as_ref()
    }

    pub fn set_iterate(&mut self, it: Option<NlpIterate>) {
        self.iterate = it;
    }

    pub fn last_commands(&self) -> Commands {
        self.last_commands
    }

    /// Models used by the most recent step, one per interval.
    pub fn last_models(&self) -> &[Arc<dyn AccelerationModel>] {
        &self.last_models
    }

    pub fn period(&self) -> f64 {
        1.0 / self.config.rate
    }

    fn safe_stop(&self) -> Commands {
        Commands {
            gamma: self.config.ocp.stage_lower[2],
            beta: 0.0,
            tau_v: 0.0,
        }
    }

    /// The measured state as the controller sees it: command states are its own last commands.
    pub fn measured_state(
        &self,
        vx: f64,
        vy: f64,
        yaw_rate: f64,
        e_theta: f64,
        e_y: f64,
    ) -> VehicleState {
        VehicleState {
            vx,
            vy,
            yaw_rate,
            e_theta,
            e_y,
            gamma: self.last_commands.gamma,
            beta: self.last_commands.beta,
            tau_v: self.last_commands.tau_v,
            t: 0.0,
        }
    }

    /// One real-time iteration at unwrapped abscissa `s_now`.
    pub fn rti_step(&mut self, measured: &VehicleState, s_now: f64) -> (Commands, StepDiagnostics) {
        let start = Instant::now();
        let mut diag = StepDiagnostics {
            solve_time_ms: 0.0,
            kkt: KktResiduals::default(),
            qp_iters: 0,
            qp_status: None,
            outcome: StepOutcome::Ok,
            cold_started: false,
            eta: 0.0,
            e_y_terminal: 0.0,
            eta_terminal: 0.0,
            predicted_next: None,
            message: None,
        };
        let result = self.try_step(measured, s_now, &mut diag);
        let commands = match result {
            Ok(c) => {
                self.consecutive_failures = 0;
                c
            }
            Err(e) => {
                self.iterate = None;
                self.consecutive_failures += 1;
                diag.message = Some(e.to_string());
                if matches!(e, Error::Singularity(_))
                    || self.consecutive_failures > self.config.failure_budget
                {
                    diag.outcome = StepOutcome::SafeStop;
                    self.safe_stop()
                } else {
                    diag.outcome = StepOutcome::Degraded;
                    self.last_commands
                }
            }
        };
        self.last_commands = commands;
        diag.solve_time_ms = start.elapsed().as_secs_f64() * 1e3;
        (commands, diag)
    }

    fn try_step(
        &mut self,
        measured: &VehicleState,
        s_now: f64,
        diag: &mut StepDiagnostics,
    ) -> Result<Commands> {
        if !measured.is_finite() {
            return Err(Error::invalid("measured state is not finite"));
        }
        let ocp = &self.config.ocp;
        let shifted = self
            .iterate
            .as_ref()
            .and_then(|it| warm_start_shift(it, s_now, ocp, self.track.length()));
        let mut it = match shifted {
            Some(it) => it,
            None => {
                diag.cold_started = true;
                cold_start(measured, s_now, &self.track, ocp)?
            }
        };
        it.x0 = measured.to_vector();
        it.x0[idx::T] = 0.0;
        let m = ocp.n_intervals();
        self.last_models = self.model.interval_models(&it.x[..m])?;
        let refs = model_refs(&self.last_models);
        let qp_problem = linearize(ocp, &self.track, &refs, &it)?;
        let sol = qp::solve(&qp_problem, &self.config.qp)?;
        diag.qp_iters = sol.iterations;
        diag.qp_status = Some(sol.status);
        if sol.status != QpStatus::Optimal {
            return Err(Error::numerical(format!("QP returned {:?}", sol.status)));
        }
        diag.kkt = kkt_residuals(&qp_problem, &sol);
        apply_step(&mut it, &sol, 1.0);
        let next = sample_at_time(&it, self.period());
        diag.predicted_next = Some(next);
        diag.eta = it.u[0][idx::ETA];
        diag.eta_terminal = it.u[m - 1][idx::ETA];
        diag.e_y_terminal = it.x[m][idx::EY];
        self.iterate = Some(it);
        Ok(Commands {
            gamma: next[idx::GAMMA],
            beta: next[idx::BETA],
            tau_v: next[idx::TAU],
        })
    }
}
