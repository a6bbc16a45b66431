//! Data acquisition from simulation, smoothing, dataset assembly, model training and the
//! evaluation metrics.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{AccelerationModel, GpInput, NGP};
use crate::error::{Error, Result};
use crate::gp::{
    load_channel_file, save_channel_file, train_hyperparams, ChannelFile, GpDataset, GpModel,
    TrainConfig,
};
use crate::plant::{NominalModel, PlantParams};
use crate::reduce::{sod_reduce, SodSet, SparseGp, DEFAULT_SOD_THRESHOLD};
use crate::sim::{
    closed_loop_simulate, CommandDither, Dithered, Driver, RunLog, RunMetadata, ScriptedExcitation,
    SimConfig,
};
use crate::sqp::{Controller, ControllerConfig, PredictionModel};
use crate::track::Track;

pub const DEFAULT_RECORD_LAPS: usize = 10;
/// Training rows kept after decimation.
pub const DEFAULT_MAX_POINTS: usize = 5000;
pub const LATERAL_FILE: &str = "lateral.json";
pub const YAW_FILE: &str = "yaw.json";

/// Hex SHA-256 of the JSON encoding of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriverKind {
    Nominal,
    Scripted,
}

impl DriverKind {
    pub fn name(&self) -> &'static str {
        match self {
            DriverKind::Nominal => "nominal",
            DriverKind::Scripted => "scripted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecordConfig {
    pub driver: DriverKind,
    pub sim: SimConfig,
    pub plant: PlantParams,
    pub controller: ControllerConfig,
    pub excitation: ScriptedExcitation,
    /// Perturbation added to the recorded driver's commands.
    pub dither: Option<CommandDither>,
}

impl Default for RecordConfig {
    fn default() -> Self {
        Self {
            driver: DriverKind::Nominal,
            sim: SimConfig {
                laps: Some(DEFAULT_RECORD_LAPS),
                ..SimConfig::default()
            },
            plant: PlantParams::default(),
            controller: ControllerConfig::default(),
            excitation: ScriptedExcitation::default(),
            dither: Some(CommandDither::default()),
        }
    }
}

fn metadata(config: &RecordConfig, track_id: &str, driver: &str) -> Result<RunMetadata> {
    Ok(RunMetadata {
        seed: config.sim.seed,
        config_hash: config_hash(config)?,
        track_id: track_id.to_string(),
        driver: driver.to_string(),
    })
}

fn is_zero_duration(sim: &SimConfig) -> bool {
    sim.laps == Some(0) || sim.max_time <= 0.0
}

/// Drives the plant with the configured driver and returns the 100 Hz log.
///
/// Simulation failures end the run early; the partial log is returned with its termination
/// reason.
pub fn record_run(config: &RecordConfig, track: &Arc<Track>, track_id: &str) -> Result<RunLog> {
    let meta = metadata(config, track_id, config.driver.name())?;
    if is_zero_duration(&config.sim) {
        return Ok(RunLog::empty(meta, track.length()));
    }
    match config.driver {
        DriverKind::Nominal => {
            let model = PredictionModel::Nominal(NominalModel::new(config.plant)?);
            let ctrl = Controller::new(config.controller.clone(), model, Arc::clone(track))?;
            drive(ctrl, config, track, meta)
        }
        DriverKind::Scripted => drive(config.excitation, config, track, meta),
    }
}

fn drive<D: Driver>(
    driver: D,
    config: &RecordConfig,
    track: &Track,
    meta: RunMetadata,
) -> Result<RunLog> {
    match &config.dither {
        Some(d) => {
            let mut driver = Dithered::new(driver, d, config.sim.seed);
            closed_loop_simulate(&mut driver, &config.plant, track, &config.sim, meta)
        }
        None => {
            let mut driver = driver;
            closed_loop_simulate(&mut driver, &config.plant, track, &config.sim, meta)
        }
    }
}

/// Closed loop with the black-box controller built from the two reduced channels.
pub fn simulate_black_box(
    config: &RecordConfig,
    lateral: Arc<SparseGp>,
    yaw: Arc<SparseGp>,
    track: &Arc<Track>,
    track_id: &str,
) -> Result<RunLog> {
    let meta = metadata(config, track_id, "blackbox")?;
    if is_zero_duration(&config.sim) {
        return Ok(RunLog::empty(meta, track.length()));
    }
    let model = PredictionModel::black_box(lateral, yaw);
    let mut ctrl = Controller::new(config.controller.clone(), model, Arc::clone(track))?;
    closed_loop_simulate(&mut ctrl, &config.plant, track, &config.sim, meta)
}

/// Smoothed values and their time derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct Smoothed {
    pub values: Vec<f64>,
    pub rates: Vec<f64>,
}

fn uniform_step(times: &[f64]) -> Result<f64> {
    let n = times.len();
    if n < 2 {
        return Ok(0.0);
    }
    let dt = (times[n - 1] - times[0]) / (n - 1) as f64;
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid("timestamps must be strictly increasing"));
    }
    for w in times.windows(2) {
        if ((w[1] - w[0]) - dt).abs() > 1e-6 * dt {
            return Err(Error::invalid("timestamps are not uniformly spaced"));
        }
    }
    Ok(dt)
}

struct KalmanModel {
    f: Matrix2<f64>,
    q: Matrix2<f64>,
    r: f64,
    dt: f64,
}

impl KalmanModel {
    fn new(dt: f64, process_noise: f64, meas_noise: f64) -> Result<Self> {
        if !(process_noise > 0.0) || !(meas_noise > 0.0) {
            return Err(Error::invalid(
                "process and measurement noise must be positive",
            ));
        }
        let q = process_noise;
        Ok(Self {
            f: Matrix2::new(1.0, dt, 0.0, 1.0),
            q: Matrix2::new(
                q * dt.powi(3) / 3.0,
                q * dt * dt / 2.0,
                q * dt * dt / 2.0,
                q * dt,
            ),
            r: meas_noise * meas_noise,
            dt,
        })
    }
}

struct ForwardPass {
    filtered: Vec<Vector2<f64>>,
    cov: Vec<Matrix2<f64>>,
    predicted: Vec<Vector2<f64>>,
    pred_cov: Vec<Matrix2<f64>>,
}

/// Forward filter with an exact diffuse prior; entries from index 1 on are meaningful.
fn forward_pass(m: &KalmanModel, z: &[f64]) -> ForwardPass {
    let n = z.len();
    let (dt, r) = (m.dt, m.r);
    let mut out = ForwardPass {
        filtered: vec![Vector2::zeros(); n],
        cov: vec![Matrix2::zeros(); n],
        predicted: vec![Vector2::zeros(); n],
        pred_cov: vec![Matrix2::zeros(); n],
    };
    // the first two measurements pin down value and rate
    out.filtered[1] = Vector2::new(z[1], (z[1] - z[0]) / dt);
    out.cov[1] = Matrix2::new(r, r / dt, r / dt, 2.0 * r / (dt * dt) + m.q[(1, 1)] / 3.0);
    for k in 2..n {
        let xp = m.f * out.filtered[k - 1];
        let pp = m.f * out.cov[k - 1] * m.f.transpose() + m.q;
        let s = pp[(0, 0)] + r;
        let gain = pp.column(0) / s;
        let x = xp + gain * (z[k] - xp[0]);
        let p = pp - gain * gain.transpose() * s;
        out.predicted[k] = xp;
        out.pred_cov[k] = pp;
        out.filtered[k] = x;
        out.cov[k] = 0.5 * (p + p.transpose());
    }
    out
}

fn check_series(times: &[f64], values: &[f64]) -> Result<f64> {
    if times.len() != values.len() {
        return Err(Error::invalid("times and values differ in length"));
    }
    if values.iter().chain(times).any(|v| !v.is_finite()) {
        return Err(Error::invalid("series contains non-finite entries"));
    }
    uniform_step(times)
}

/// Causal Kalman filter on a constant-velocity model (state: value, rate).
///
/// `process_noise` is the spectral density of the white acceleration driving the rate;
/// `meas_noise` is the measurement standard deviation.
pub fn kalman_filter(
    times: &[f64],
    values: &[f64],
    process_noise: f64,
    meas_noise: f64,
) -> Result<Smoothed> {
    let dt = check_series(times, values)?;
    let n = values.len();
    if n < 2 {
        return Ok(Smoothed {
            values: values.to_vec(),
            rates: vec![0.0; n],
        });
    }
    let model = KalmanModel::new(dt, process_noise, meas_noise)?;
    let fwd = forward_pass(&model, values);
    let mut out = Smoothed {
        values: vec![values[0]; n],
        rates: vec![0.0; n],
    };
    for k in 1..n {
        out.values[k] = fwd.filtered[k][0];
        out.rates[k] = fwd.filtered[k][1];
    }
    out.rates[0] = out.rates[1];
    Ok(out)
}

/// Forward Kalman filter followed by a Rauch-Tung-Striebel backward pass.
///
/// Both ends use an exact diffuse prior, so the result is symmetric under time reversal and a
/// noiseless ramp is reproduced exactly. Timestamps must be uniformly spaced.
pub fn kalman_smooth(
    times: &[f64],
    values: &[f64],
    process_noise: f64,
    meas_noise: f64,
) -> Result<Smoothed> {
    let dt = check_series(times, values)?;
    let n = values.len();
    if n < 2 {
        return Ok(Smoothed {
            values: values.to_vec(),
            rates: vec![0.0; n],
        });
    }
    let model = KalmanModel::new(dt, process_noise, meas_noise)?;
    let fwd = forward_pass(&model, values);
    let mut xs = fwd.filtered.clone();
    for k in (1..n - 1).rev() {
        let pp = fwd.pred_cov[k + 1];
        let inv = pp
            .try_inverse()
            .ok_or_else(|| Error::numerical("singular predicted covariance"))?;
        let c = fwd.cov[k] * model.f.transpose() * inv;
        xs[k] = fwd.filtered[k] + c * (xs[k + 1] - fwd.predicted[k + 1]);
    }
    // first sample: flat prior, conditioned on its measurement and the smoothed successor
    let qi = model
        .q
        .try_inverse()
        .ok_or_else(|| Error::numerical("singular process covariance"))?;
    let ft_qi = model.f.transpose() * qi;
    let a = ft_qi * model.f + Matrix2::new(1.0 / model.r, 0.0, 0.0, 0.0);
    let b = ft_qi * xs[1] + Vector2::new(values[0] / model.r, 0.0);
    xs[0] = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::numerical("singular first-sample system"))?;
    Ok(Smoothed {
        values: xs.iter().map(|x| x[0]).collect(),
        rates: xs.iter().map(|x| x[1]).collect(),
    })
}

/// How the acceleration targets are obtained from a log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSource {
    /// Accelerations reported by the plant.
    Plant,
    /// Derivatives of the Kalman-smoothed velocities, optionally after adding sensor noise.
    Smoothed {
        process_noise_vy: f64,
        process_noise_yaw_rate: f64,
        meas_noise_vy: f64,
        meas_noise_yaw_rate: f64,
        inject_noise: bool,
        seed: u64,
    },
}

impl Default for TargetSource {
    fn default() -> Self {
        TargetSource::Plant
    }
}

impl TargetSource {
    pub fn smoothed_default() -> Self {
        TargetSource::Smoothed {
            process_noise_vy: 400.0,
            process_noise_yaw_rate: 400.0,
            meas_noise_vy: 0.02,
            meas_noise_yaw_rate: 0.01,
            inject_noise: true,
            seed: 0,
        }
    }
}

/// Regressor rows and targets extracted from a log, with their timestamps and laps.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingRows {
    pub t: Vec<f64>,
    pub lap: Vec<usize>,
    pub inputs: Vec<GpInput>,
    pub lateral: Vec<f64>,
    pub yaw: Vec<f64>,
}

impl TrainingRows {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    fn select(&self, keep: impl Fn(usize) -> bool) -> Self {
        let mut out = Self::default();
        for i in (0..self.len()).filter(|&i| keep(i)) {
            out.t.push(self.t[i]);
            out.lap.push(self.lap[i]);
            out.inputs.push(self.inputs[i]);
            out.lateral.push(self.lateral[i]);
            out.yaw.push(self.yaw[i]);
        }
        out
    }

    /// Rows whose lap satisfies `pred`.
    pub fn filter_laps(&self, pred: impl Fn(usize) -> bool) -> Self {
        self.select(|i| pred(self.lap[i]))
    }

    /// Keeps every `ceil(len / max_points)`-th row.
    pub fn decimate(&self, max_points: usize) -> Self {
        if max_points == 0 || self.len() <= max_points {
            return self.clone();
        }
        let stride = self.len().div_ceil(max_points);
        self.select(|i| i % stride == 0)
    }

    /// Datasets for the lateral and yaw channels with freshly fitted standardizers.
    pub fn to_datasets(&self) -> Result<(GpDataset, GpDataset)> {
        if self.is_empty() {
            return Err(Error::invalid("no training rows"));
        }
        let flat: Vec<f64> = self.inputs.iter().flatten().copied().collect();
        let x = DMatrix::from_row_slice(self.len(), NGP, &flat);
        Ok((
            GpDataset::new(x.clone(), DVector::from_vec(self.lateral.clone()))?,
            GpDataset::new(x, DVector::from_vec(self.yaw.clone()))?,
        ))
    }
}

/// Regressors `[vx, vy, yaw_rate, gamma, beta, tau_v]` (commanded actuator values) and
/// acceleration targets at every log sample.
pub fn extract_rows(log: &RunLog, source: &TargetSource) -> Result<TrainingRows> {
    if log.samples.is_empty() {
        return Err(Error::invalid("log has no samples"));
    }
    let s = &log.samples;
    let t: Vec<f64> = s.iter().map(|x| x.t).collect();
    let (lateral, yaw) = match source {
        TargetSource::Plant => (
            s.iter().map(|x| x.ay).collect(),
            s.iter().map(|x| x.yaw_acc).collect(),
        ),
        TargetSource::Smoothed {
            process_noise_vy,
            process_noise_yaw_rate,
            meas_noise_vy,
            meas_noise_yaw_rate,
            inject_noise,
            seed,
        } => {
            let mut vy: Vec<f64> = s.iter().map(|x| x.vy).collect();
            let mut r: Vec<f64> = s.iter().map(|x| x.yaw_rate).collect();
            if *inject_noise {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let nv =
                    Normal::new(0.0, *meas_noise_vy).map_err(|e| Error::invalid(e.to_string()))?;
                let nr = Normal::new(0.0, *meas_noise_yaw_rate)
                    .map_err(|e| Error::invalid(e.to_string()))?;
                for (a, b) in vy.iter_mut().zip(r.iter_mut()) {
                    *a += nv.sample(&mut rng);
                    *b += nr.sample(&mut rng);
                }
            }
            let sv = kalman_smooth(&t, &vy, *process_noise_vy, *meas_noise_vy)?;
            let sr = kalman_smooth(&t, &r, *process_noise_yaw_rate, *meas_noise_yaw_rate)?;
            (sv.rates, sr.rates)
        }
    };
    Ok(TrainingRows {
        lap: s.iter().map(|x| x.lap).collect(),
        inputs: s
            .iter()
            .map(|x| [x.vx, x.vy, x.yaw_rate, x.gamma_cmd, x.beta_cmd, x.tau_cmd])
            .collect(),
        t,
        lateral,
        yaw,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: TargetSource,
    pub max_points: usize,
    /// Completed laps at the end of the log held out for evaluation.
    pub holdout_laps: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: TargetSource::Plant,
            max_points: DEFAULT_MAX_POINTS,
            holdout_laps: 1,
        }
    }
}

/// Training and held-out rows, split by whole laps.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitRows {
    pub train: TrainingRows,
    pub holdout: TrainingRows,
}

/// Splits by lap: the last `holdout_laps` completed laps are held out, the trailing partial lap
/// is dropped. Logs with too few laps keep everything for training.
pub fn split_rows(log: &RunLog, config: &DatasetConfig) -> Result<SplitRows> {
    let rows = extract_rows(log, &config.source)?;
    let done = log.completed_laps();
    if config.holdout_laps == 0 || done <= config.holdout_laps {
        return Ok(SplitRows {
            train: rows.decimate(config.max_points),
            holdout: TrainingRows::default(),
        });
    }
    let first_holdout = done - config.holdout_laps;
    Ok(SplitRows {
        train: rows
            .filter_laps(|l| l < first_holdout)
            .decimate(config.max_points),
        holdout: rows.filter_laps(|l| l >= first_holdout && l < done),
    })
}

/// Lateral and yaw datasets from the training laps of `log`.
pub fn assemble_dataset(log: &RunLog, config: &DatasetConfig) -> Result<(GpDataset, GpDataset)> {
    split_rows(log, config)?.train.to_datasets()
}

/// Trains both channels and fits the full models.
pub fn train_channels(
    lateral: &GpDataset,
    yaw: &GpDataset,
    config: &TrainConfig,
) -> Result<(GpModel, GpModel)> {
    let pl = train_hyperparams(lateral, config)?;
    let py = train_hyperparams(yaw, config)?;
    Ok((GpModel::fit(&pl, lateral)?, GpModel::fit(&py, yaw)?))
}

/// Writes `lateral.json` and `yaw.json` into `dir`.
pub fn save_models(dir: &Path, lateral: &ChannelFile, yaw: &ChannelFile) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_channel_file(&dir.join(LATERAL_FILE), lateral)?;
    save_channel_file(&dir.join(YAW_FILE), yaw)
}

pub fn load_models(dir: &Path) -> Result<(ChannelFile, ChannelFile)> {
    Ok((
        load_channel_file(&dir.join(LATERAL_FILE))?,
        load_channel_file(&dir.join(YAW_FILE))?,
    ))
}

/// Runs the SoD selection on a stored channel and records it in the file.
pub fn reduce_channel(file: &mut ChannelFile, threshold_factor: f64) -> Result<SodSet> {
    let sod = sod_reduce(&file.params, &file.dataset()?, threshold_factor)?;
    file.sod_indices = Some(sod.indices.clone());
    file.sod_threshold_factor = Some(threshold_factor);
    Ok(sod)
}

/// The reduced model of a stored channel; files without a selection keep every row.
pub fn sparse_from_file(file: &ChannelFile) -> Result<SparseGp> {
    let ds = file.dataset()?;
    let indices = file
        .sod_indices
        .clone()
        .unwrap_or_else(|| (0..ds.len()).collect());
    let sod = SodSet {
        indices,
        threshold_factor: file.sod_threshold_factor.unwrap_or(DEFAULT_SOD_THRESHOLD),
        params: file.params.clone(),
    };
    SparseGp::new(Arc::new(ds), sod)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseRow {
    pub model: String,
    /// m/s^2
    pub lateral: f64,
    /// rad/s^2
    pub yaw: f64,
    pub samples: usize,
}

fn rmse(err: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for e in err {
        s += e * e;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        (s / n as f64).sqrt()
    }
}

fn rmse_row(
    name: &str,
    rows: &TrainingRows,
    mut predict: impl FnMut(&GpInput) -> Result<(f64, f64)>,
) -> Result<RmseRow> {
    let mut el = Vec::with_capacity(rows.len());
    let mut ey = Vec::with_capacity(rows.len());
    for (i, x) in rows.inputs.iter().enumerate() {
        let (l, y) = predict(x)?;
        el.push(l - rows.lateral[i]);
        ey.push(y - rows.yaw[i]);
    }
    Ok(RmseRow {
        model: name.to_string(),
        lateral: rmse(el.into_iter()),
        yaw: rmse(ey.into_iter()),
        samples: rows.len(),
    })
}

/// Models compared by [`rmse_report`]; absent entries are skipped.
#[derive(Default)]
pub struct EvalModels<'a> {
    pub nominal: Option<&'a PlantParams>,
    pub full: Option<(&'a GpModel, &'a GpModel)>,
    pub sparse: Option<(&'a SparseGp, &'a SparseGp)>,
    pub t_nn: (usize, usize),
}

/// Acceleration RMSE of every available model on `rows`. The nearest-neighbour variant picks
/// neighbours for each sample separately.
pub fn rmse_report(models: &EvalModels<'_>, rows: &TrainingRows) -> Result<Vec<RmseRow>> {
    let mut out = Vec::new();
    if let Some(p) = models.nominal {
        let m = NominalModel::new(*p)?;
        out.push(rmse_row("nominal", rows, |x| {
            let (l, y) = m.means(x);
            Ok((l, y))
        })?);
    }
    if let Some((l, y)) = models.full {
        out.push(rmse_row("gp_full", rows, |x| {
            Ok((l.posterior_mean(x)?, y.posterior_mean(x)?))
        })?);
    }
    if let Some((l, y)) = models.sparse {
        let (ml, my) = (l.sod_model()?, y.sod_model()?);
        out.push(rmse_row("gp_sod", rows, |x| {
            Ok((ml.posterior_mean(x)?, my.posterior_mean(x)?))
        })?);
        let (tl, ty) = models.t_nn;
        out.push(rmse_row("gp_nn", rows, |x| {
            let a = [x.to_vec()];
            let ll = &l.select_along_horizon(&a, tl)?[0];
            let yy = &y.select_along_horizon(&a, ty)?[0];
            Ok((ll.model.posterior_mean(x)?, yy.model.posterior_mean(x)?))
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneStepRow {
    pub run: String,
    /// m/s
    pub vy: f64,
    /// rad/s
    pub yaw_rate: f64,
    pub steps: usize,
}

/// RMSE between each step's predicted next velocities and the velocities measured at the next
/// control step.
pub fn one_step_prediction_report(run: &str, log: &RunLog) -> OneStepRow {
    let pairs: Vec<_> = log
        .control
        .windows(2)
        .filter(|w| w[0].has_prediction)
        .map(|w| (w[0].pred_vy - w[1].vy, w[0].pred_yaw_rate - w[1].yaw_rate))
        .collect();
    OneStepRow {
        run: run.to_string(),
        vy: rmse(pairs.iter().map(|p| p.0)),
        yaw_rate: rmse(pairs.iter().map(|p| p.1)),
        steps: pairs.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LapRow {
    pub run: String,
    pub lap: usize,
    /// s
    pub time: f64,
    pub max_abs_e_y: f64,
    /// Samples outside the inset corridor.
    pub reduced_violations: usize,
    /// Samples outside the track.
    pub hard_violations: usize,
    pub max_abs_eta: f64,
    pub min_vx: f64,
    pub max_vx: f64,
}

/// Per-lap statistics of the completed laps.
pub fn lap_report(
    run: &str,
    log: &RunLog,
    track: &Track,
    bound_reduction: f64,
) -> Result<Vec<LapRow>> {
    let mut out = Vec::new();
    for (lap, &time) in log.lap_times.iter().enumerate() {
        let mut row = LapRow {
            run: run.to_string(),
            lap,
            time,
            max_abs_e_y: 0.0,
            reduced_violations: 0,
            hard_violations: 0,
            max_abs_eta: 0.0,
            min_vx: f64::INFINITY,
            max_vx: f64::NEG_INFINITY,
        };
        for s in log.samples.iter().filter(|s| s.lap == lap) {
            let (lb, ub) = track.bounds_at(s.s)?;
            row.max_abs_e_y = row.max_abs_e_y.max(s.e_y.abs());
            if s.e_y < lb + bound_reduction || s.e_y > ub - bound_reduction {
                row.reduced_violations += 1;
            }
            if s.e_y < lb || s.e_y > ub {
                row.hard_violations += 1;
            }
            row.min_vx = row.min_vx.min(s.vx);
            row.max_vx = row.max_vx.max(s.vx);
        }
        for c in log.control.iter().filter(|c| c.lap == lap) {
            row.max_abs_eta = row.max_abs_eta.max(c.eta.abs());
        }
        out.push(row);
    }
    Ok(out)
}

/// Collected evaluation results.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmse: Vec<RmseRow>,
    pub one_step: Vec<OneStepRow>,
    pub laps: Vec<LapRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: String,
    pub completed_laps: usize,
    pub mean_lap_time: Option<f64>,
    pub one_step_vy: Option<f64>,
    pub one_step_yaw_rate: Option<f64>,
}

impl EvalReport {
    pub fn summary(&self) -> Vec<RunSummary> {
        let mut runs: Vec<String> = self.laps.iter().map(|l| l.run.clone()).collect();
        runs.extend(self.one_step.iter().map(|o| o.run.clone()));
        runs.dedup();
        let mut seen = Vec::new();
        for r in runs {
            if !seen.contains(&r) {
                seen.push(r);
            }
        }
        seen.into_iter()
            .map(|run| {
                let laps: Vec<f64> = self
                    .laps
                    .iter()
                    .filter(|l| l.run == run)
                    .map(|l| l.time)
                    .collect();
                let os = self.one_step.iter().find(|o| o.run == run);
                RunSummary {
                    completed_laps: laps.len(),
                    mean_lap_time: (!laps.is_empty())
                        .then(|| laps.iter().sum::<f64>() / laps.len() as f64),
                    one_step_vy: os.map(|o| o.vy),
                    one_step_yaw_rate: os.map(|o| o.yaw_rate),
                    run,
                }
            })
            .collect()
    }

    /// Writes `rmse.csv`, `one_step.csv`, `laps.csv` and `summary.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_csv(&dir.join("rmse.csv"), &self.rmse)?;
        write_csv(&dir.join("one_step.csv"), &self.one_step)?;
        write_csv(&dir.join("laps.csv"), &self.laps)?;
        #[derive(Serialize)]
        struct Summary<'a> {
            runs: Vec<RunSummary>,
            rmse: &'a [RmseRow],
        }
        let s = Summary {
            runs: self.summary(),
            rmse: &self.rmse,
        };
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&s)?)?;
        Ok(())
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct LongRow<'a> {
    run: &'a str,
    variable: &'static str,
    t: f64,
    s: f64,
    value: f64,
}

/// Plot-ready long-format CSV with one row per (run, variable, sample).
pub fn write_long_format(path: &Path, runs: &[(&str, &RunLog)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (run, log) in runs {
        for s in &log.samples {
            let vars: [(&'static str, f64); 8] = [
                ("vx", s.vx),
                ("vy", s.vy),
                ("yaw_rate", s.yaw_rate),
                ("e_y", s.e_y),
                ("e_theta", s.e_theta),
                ("gamma", s.gamma_cmd),
                ("beta", s.beta_cmd),
                ("tau_v", s.tau_cmd),
            ];
            for (variable, value) in vars {
                w.serialize(LongRow {
                    run,
                    variable,
                    t: s.t,
                    s: s.s_unwrapped,
                    value,
                })?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_is_reproduced() {
        let t: Vec<f64> = (0..50).map(|i| i as f64 * 0.01).collect();
        let y: Vec<f64> = t.iter().map(|t| 3.0 - 2.0 * t).collect();
        let s = kalman_smooth(&t, &y, 10.0, 0.1).unwrap();
        for i in 0..t.len() {
            assert!((s.values[i] - y[i]).abs() < 1e-9);
            assert!((s.rates[i] + 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn uneven_timestamps_are_rejected() {
        let t = [0.0, 0.01, 0.03];
        assert!(kalman_smooth(&t, &[0.0; 3], 1.0, 1.0).is_err());
    }

    #[test]
    fn decimation_respects_the_cap() {
        let rows = TrainingRows {
            t: (0..11).map(|i| i as f64).collect(),
            lap: vec![0; 11],
            inputs: vec![[0.0; NGP]; 11],
            lateral: vec![0.0; 11],
            yaw: vec![0.0; 11],
        };
        let d = rows.decimate(5);
        assert!(d.len() <= 5);
        assert_eq!(d.t, vec![0.0, 3.0, 6.0, 9.0]);
    }
}
