//! Closed-loop simulation of a driver against the plant on a track, and the run log it
//! produces.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::{
    global_to_frenet, plant_accelerations, plant_step, Commands, PlantParams, PlantState,
};
use crate::sqp::{Controller, StepDiagnostics, StepOutcome};
use crate::track::{FrenetPose, Track};

pub const DEFAULT_PLANT_DT: f64 = 1.0 / 200.0;
pub const DEFAULT_LOG_RATE: f64 = 100.0;

/// Standard deviations of the zero-mean Gaussian noise on what the driver observes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MeasurementNoise {
    pub vx: f64,
    pub vy: f64,
    pub yaw_rate: f64,
    pub e_y: f64,
    pub e_theta: f64,
}

impl MeasurementNoise {
    pub fn is_zero(&self) -> bool {
        [self.vx, self.vy, self.yaw_rate, self.e_y, self.e_theta]
            .iter()
            .all(|v| *v == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub plant_dt: f64,
    pub log_rate: f64,
    /// Stop after this many completed laps.
    pub laps: Option<usize>,
    /// Hard time limit, s.
    pub max_time: f64,
    pub start_s: f64,
    pub start_speed: f64,
    pub noise: MeasurementNoise,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            plant_dt: DEFAULT_PLANT_DT,
            log_rate: DEFAULT_LOG_RATE,
            laps: Some(3),
            max_time: 300.0,
            start_s: 0.0,
            start_speed: 5.0,
            noise: MeasurementNoise::default(),
            seed: 0,
        }
    }
}

/// What the driver sees at a control instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub time: f64,
    pub plant: PlantState,
    pub frenet: FrenetPose,
    pub s_unwrapped: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriverOutput {
    pub commands: Commands,
    pub diagnostics: Option<StepDiagnostics>,
}

pub trait Driver {
    /// Control rate, Hz.
    fn rate(&self) -> f64;
    fn act(&mut self, obs: &Observation, track: &Track) -> DriverOutput;
}

/// Never commands anything.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDriver;

impl Driver for ZeroDriver {
    fn rate(&self) -> f64 {
        20.0
    }

    fn act(&mut self, _obs: &Observation, _track: &Track) -> DriverOutput {
        DriverOutput {
            commands: Commands::default(),
            diagnostics: None,
        }
    }
}

/// Path-following feedback with sinusoidal steering dither and a swept speed target, used to
/// excite the lateral dynamics for data collection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScriptedExcitation {
    pub wheelbase: f64,
    pub k_ey: f64,
    pub k_etheta: f64,
    pub k_speed: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub speed_period: f64,
    /// Lateral acceleration used to cap the speed target in corners, m/s^2.
    pub lateral_limit: f64,
    pub steer_amplitude: f64,
    pub steer_period: f64,
    pub tv_amplitude: f64,
    pub tv_period: f64,
}

impl Default for ScriptedExcitation {
    fn default() -> Self {
        Self {
            wheelbase: 1.2,
            k_ey: 0.25,
            k_etheta: 0.9,
            k_speed: 1.5,
            speed_min: 4.0,
            speed_max: 10.0,
            speed_period: 23.0,
            lateral_limit: 5.5,
            steer_amplitude: 0.04,
            steer_period: 1.7,
            tv_amplitude: 0.5,
            tv_period: 2.9,
        }
    }
}

impl Driver for ScriptedExcitation {
    fn rate(&self) -> f64 {
        20.0
    }

    fn act(&mut self, obs: &Observation, track: &Track) -> DriverOutput {
        let p = &obs.plant;
        let f = &obs.frenet;
        let t = obs.time;
        // speed target: slow sweep, capped by the sharpest curvature a short distance ahead
        let phase = 0.5 - 0.5 * (2.0 * PI * t / self.speed_period).cos();
        let mut v_ref = self.speed_min + (self.speed_max - self.speed_min) * phase;
        for k in 0..8 {
            let zeta = track
                .curvature_at(obs.s_unwrapped + k as f64 * 1.5)
                .unwrap_or(0.0);
            if zeta.abs() > 1e-6 {
                v_ref = v_ref.min((self.lateral_limit / zeta.abs()).sqrt());
            }
        }
        let zeta = track
            .curvature_at(obs.s_unwrapped + 0.5 * p.vx.max(1.0) * 0.2)
            .unwrap_or(0.0);
        let beta = (self.wheelbase * zeta).atan() - self.k_ey * f.e_y - self.k_etheta * f.e_theta
            + self.steer_amplitude * (2.0 * PI * t / self.steer_period).sin();
        let gamma = (self.k_speed * (v_ref - p.vx)).clamp(-4.2, 2.0);
        let tau_v = self.tv_amplitude * (2.0 * PI * t / self.tv_period).sin();
        DriverOutput {
            commands: Commands {
                gamma,
                beta: beta.clamp(-0.5, 0.5),
                tau_v,
            },
            diagnostics: None,
        }
    }
}

/// Seeded multi-sine perturbation added to a driver's commands to decorrelate the commands from
/// the state during data collection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommandDither {
    pub gamma: f64,
    pub beta: f64,
    pub tau_v: f64,
    /// Frequency band of the sinusoids, Hz.
    pub min_freq: f64,
    pub max_freq: f64,
}

impl Default for CommandDither {
    fn default() -> Self {
        Self {
            gamma: 0.4,
            beta: 0.06,
            tau_v: 0.4,
            min_freq: 0.2,
            max_freq: 1.0,
        }
    }
}

const DITHER_TONES: usize = 5;

/// Wraps a driver and adds [`CommandDither`] to its commands.
pub struct Dithered<D> {
    pub inner: D,
    amplitude: [f64; 3],
    tones: [[(f64, f64); DITHER_TONES]; 3],
}

impl<D: Driver> Dithered<D> {
    pub fn new(inner: D, dither: &CommandDither, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tones = [[(0.0, 0.0); DITHER_TONES]; 3];
        for channel in tones.iter_mut() {
            for tone in channel.iter_mut() {
                let u: f64 = rng.random();
                let phase: f64 = rng.random::<f64>() * 2.0 * PI;
                *tone = (
                    dither.min_freq + u * (dither.max_freq - dither.min_freq),
                    phase,
                );
            }
        }
        Self {
            inner,
            amplitude: [dither.gamma, dither.beta, dither.tau_v],
            tones,
        }
    }

    /// Perturbation at time `t`, each channel bounded by its amplitude.
    pub fn offset(&self, t: f64) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let sum: f64 = self.tones[c]
                .iter()
                .map(|(f, ph)| (2.0 * PI * f * t + ph).sin())
                .sum();
            *o = self.amplitude[c] * sum / DITHER_TONES as f64;
        }
        out
    }
}

impl<D: Driver> Driver for Dithered<D> {
    fn rate(&self) -> f64 {
        self.inner.rate()
    }

    fn act(&mut self, obs: &Observation, track: &Track) -> DriverOutput {
        let mut out = self.inner.act(obs, track);
        let d = self.offset(obs.time);
        out.commands.gamma += d[0];
        out.commands.beta += d[1];
        out.commands.tau_v += d[2];
        out
    }
}

impl Driver for Controller {
    fn rate(&self) -> f64 {
        self.config().rate
    }

    fn act(&mut self, obs: &Observation, _track: &Track) -> DriverOutput {
        let p = &obs.plant;
        let measured =
            self.measured_state(p.vx, p.vy, p.yaw_rate, obs.frenet.e_theta, obs.frenet.e_y);
        let (commands, diag) = self.rti_step(&measured, obs.s_unwrapped);
        DriverOutput {
            commands,
            diagnostics: Some(diag),
        }
    }
}

/// One row of the uniformly resampled log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogSample {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub vx: f64,
    pub vy: f64,
    pub yaw_rate: f64,
    pub gamma_cmd: f64,
    pub beta_cmd: f64,
    pub tau_cmd: f64,
    pub gamma_act: f64,
    pub beta_act: f64,
    pub tau_act: f64,
    pub ax: f64,
    pub ay: f64,
    pub yaw_acc: f64,
    pub s: f64,
    pub s_unwrapped: f64,
    pub e_y: f64,
    pub e_theta: f64,
    pub lap: usize,
}

/// Per control step record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlRecord {
    pub t: f64,
    pub s_unwrapped: f64,
    pub lap: usize,
    pub vx: f64,
    pub vy: f64,
    pub yaw_rate: f64,
    pub e_y: f64,
    pub e_theta: f64,
    pub e_y_lb: f64,
    pub e_y_ub: f64,
    pub gamma_cmd: f64,
    pub beta_cmd: f64,
    pub tau_cmd: f64,
    pub solve_time_ms: f64,
    pub kkt_stationarity: f64,
    pub kkt_max: f64,
    pub qp_iters: usize,
    pub degraded: bool,
    pub safe_stop: bool,
    pub cold_start: bool,
    pub eta: f64,
    pub e_y_terminal: f64,
    pub eta_terminal: f64,
    pub pred_vx: f64,
    pub pred_vy: f64,
    pub pred_yaw_rate: f64,
    pub has_prediction: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "detail")]
pub enum Termination {
    LapsCompleted,
    TimeLimit,
    PlantStall(String),
    Localization(String),
    Failure(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub seed: u64,
    pub config_hash: String,
    pub track_id: String,
    pub driver: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub metadata: RunMetadata,
    pub samples: Vec<LogSample>,
    pub control: Vec<ControlRecord>,
    /// Times at which the kart crossed the start line after the initial position.
    pub crossings: Vec<f64>,
    pub lap_times: Vec<f64>,
    pub termination: Termination,
    pub track_length: f64,
}

/// Side-car written next to the CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSidecar {
    pub metadata: RunMetadata,
    pub crossings: Vec<f64>,
    pub lap_times: Vec<f64>,
    pub termination: Termination,
    pub track_length: f64,
    pub samples: usize,
    pub control_steps: usize,
}

impl RunLog {
    pub fn empty(metadata: RunMetadata, track_length: f64) -> Self {
        Self {
            metadata,
            samples: Vec::new(),
            control: Vec::new(),
            crossings: Vec::new(),
            lap_times: Vec::new(),
            termination: Termination::TimeLimit,
            track_length,
        }
    }

    pub fn completed_laps(&self) -> usize {
        self.lap_times.len()
    }

    /// Mean of the laps after the first one (or of all laps when only one exists).
    pub fn mean_flying_lap(&self) -> Option<f64> {
        let laps = if self.lap_times.len() > 1 {
            &self.lap_times[1..]
        } else {
            &self.lap_times[..]
        };
        (!laps.is_empty()).then(|| laps.iter().sum::<f64>() / laps.len() as f64)
    }

    /// Writes `samples.csv`, `control.csv` and `run.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("samples.csv"))?;
        for s in &self.samples {
            w.serialize(s)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("control.csv"))?;
        for c in &self.control {
            w.serialize(c)?;
        }
        w.flush()?;
        let side = RunSidecar {
            metadata: self.metadata.clone(),
            crossings: self.crossings.clone(),
            lap_times: self.lap_times.clone(),
            termination: self.termination.clone(),
            track_length: self.track_length,
            samples: self.samples.len(),
            control_steps: self.control.len(),
        };
        fs::write(dir.join("run.json"), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let side: RunSidecar = serde_json::from_str(&fs::read_to_string(dir.join("run.json"))?)?;
        let samples = read_csv(&dir.join("samples.csv"))?;
        let control = read_csv(&dir.join("control.csv"))?;
        Ok(Self {
            metadata: side.metadata,
            samples,
            control,
            crossings: side.crossings,
            lap_times: side.lap_times,
            termination: side.termination,
            track_length: side.track_length,
        })
    }
}

fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

struct NoiseSource {
    rng: ChaCha8Rng,
    noise: MeasurementNoise,
}

impl NoiseSource {
    fn sample(&mut self, std: f64) -> f64 {
        if std > 0.0 {
            Normal::new(0.0, std)
                .map(|n| n.sample(&mut self.rng))
                .unwrap_or(0.0)
        } else {
            0.0
        }
    }

    fn observe(&mut self, mut obs: Observation) -> Observation {
        if self.noise.is_zero() {
            return obs;
        }
        let n = self.noise;
        obs.plant.vx += self.sample(n.vx);
        obs.plant.vy += self.sample(n.vy);
        obs.plant.yaw_rate += self.sample(n.yaw_rate);
        obs.frenet.e_y += self.sample(n.e_y);
        obs.frenet.e_theta += self.sample(n.e_theta);
        obs
    }
}

/// Initial plant state on the centerline at `s` moving at `speed`.
pub fn initial_state(track: &Track, s: f64, speed: f64) -> Result<PlantState> {
    let (x, y, psi) = track.pose_at(s)?;
    Ok(PlantState {
        x,
        y,
        psi,
        vx: speed,
        ..Default::default()
    })
}

/// Runs `driver` against the plant until the lap count, the time limit or a failure.
pub fn closed_loop_simulate(
    driver: &mut dyn Driver,
    plant: &PlantParams,
    track: &Track,
    config: &SimConfig,
    metadata: RunMetadata,
) -> Result<RunLog> {
    plant.validate()?;
    if !(config.plant_dt > 0.0) {
        return Err(Error::invalid("plant step must be positive"));
    }
    let steps_per_control = (1.0 / (driver.rate() * config.plant_dt)).round() as usize;
    let steps_per_log = (1.0 / (config.log_rate * config.plant_dt)).round() as usize;
    if steps_per_control == 0 || steps_per_log == 0 {
        return Err(Error::invalid(
            "control and log periods must cover at least one plant step",
        ));
    }
    let length = track.length();
    let mut log = RunLog::empty(metadata, length);
    let mut noise = NoiseSource {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        noise: config.noise,
    };
    let mut state = initial_state(track, config.start_s, config.start_speed)?;
    let mut frenet = global_to_frenet(&state, track)?;
    let s_origin = frenet.s;
    let mut s_unwrapped = frenet.s;
    let mut commands = Commands::default();
    let max_steps = (config.max_time / config.plant_dt).round() as usize;
    let target_laps = config.laps.unwrap_or(usize::MAX);

    let mut k = 0usize;
    log.termination = loop {
        let time = k as f64 * config.plant_dt;
        let lap = log.crossings.len();
        if k % steps_per_control == 0 {
            let obs = noise.observe(Observation {
                time,
                plant: state,
                frenet,
                s_unwrapped,
            });
            let out = driver.act(&obs, track);
            commands = out.commands;
            let (lb, ub) = track.bounds_at(frenet.s)?;
            let mut rec = ControlRecord {
                t: time,
                s_unwrapped,
                lap,
                vx: state.vx,
                vy: state.vy,
                yaw_rate: state.yaw_rate,
                e_y: frenet.e_y,
                e_theta: frenet.e_theta,
                e_y_lb: lb,
                e_y_ub: ub,
                gamma_cmd: commands.gamma,
                beta_cmd: commands.beta,
                tau_cmd: commands.tau_v,
                solve_time_ms: 0.0,
                kkt_stationarity: 0.0,
                kkt_max: 0.0,
                qp_iters: 0,
                degraded: false,
                safe_stop: false,
                cold_start: false,
                eta: 0.0,
                e_y_terminal: 0.0,
                eta_terminal: 0.0,
                pred_vx: f64::NAN,
                pred_vy: f64::NAN,
                pred_yaw_rate: f64::NAN,
                has_prediction: false,
            };
            if let Some(d) = out.diagnostics {
                rec.solve_time_ms = d.solve_time_ms;
                rec.kkt_stationarity = d.kkt.stationarity;
                rec.kkt_max = d.kkt.max();
                rec.qp_iters = d.qp_iters;
                rec.degraded = d.outcome == StepOutcome::Degraded;
                rec.safe_stop = d.outcome == StepOutcome::SafeStop;
                rec.cold_start = d.cold_started;
                rec.eta = d.eta;
                rec.e_y_terminal = d.e_y_terminal;
                rec.eta_terminal = d.eta_terminal;
                if let Some(p) = d.predicted_next {
                    rec.pred_vx = p[0];
                    rec.pred_vy = p[1];
                    rec.pred_yaw_rate = p[2];
                    rec.has_prediction = true;
                }
            }
            log.control.push(rec);
        }
        if k % steps_per_log == 0 {
            let (ax, ay, yaw_acc) = plant_accelerations(plant, &state);
            log.samples.push(LogSample {
                t: time,
                x: state.x,
                y: state.y,
                psi: state.psi,
                vx: state.vx,
                vy: state.vy,
                yaw_rate: state.yaw_rate,
                gamma_cmd: commands.gamma,
                beta_cmd: commands.beta,
                tau_cmd: commands.tau_v,
                gamma_act: state.gamma_act,
                beta_act: state.beta_act,
                tau_act: state.tau_act,
                ax,
                ay,
                yaw_acc,
                s: frenet.s,
                s_unwrapped,
                e_y: frenet.e_y,
                e_theta: frenet.e_theta,
                lap,
            });
        }
        if log.completed_laps() >= target_laps {
            break Termination::LapsCompleted;
        }
        if k >= max_steps {
            break Termination::TimeLimit;
        }
        let next = match plant_step(&state, &commands, plant, config.plant_dt) {
            Ok(s) => s,
            Err(Error::PlantStall { vx }) => {
                break Termination::PlantStall(format!("vx = {vx:.3}"))
            }
            Err(e) => break Termination::Failure(e.to_string()),
        };
        let next_frenet = match global_to_frenet(&next, track) {
            Ok(f) => f,
            Err(Error::Localization(msg)) => break Termination::Localization(msg),
            Err(e) => break Termination::Failure(e.to_string()),
        };
        let mut ds = next_frenet.s - frenet.s;
        if track.is_closed() {
            if ds < -0.5 * length {
                ds += length;
            } else if ds > 0.5 * length {
                ds -= length;
            }
        }
        let next_unwrapped = s_unwrapped + ds;
        // start-line crossings, linearly interpolated in time
        let line = s_origin + (log.crossings.len() + 1) as f64 * length;
        if track.is_closed() && s_unwrapped < line && next_unwrapped >= line {
            let f = (line - s_unwrapped) / (next_unwrapped - s_unwrapped);
            let tc = time + f * config.plant_dt;
            let prev = log.crossings.last().copied().unwrap_or(0.0);
            log.crossings.push(tc);
            log.lap_times.push(tc - prev);
        }
        state = next;
        frenet = next_frenet;
        s_unwrapped = next_unwrapped;
        k += 1;
    };
    Ok(log)
}
