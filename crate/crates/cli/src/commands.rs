use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context as _};
use gpkart::gp::ChannelFile;
use gpkart::pipeline::{
    config_hash, lap_report, load_models, one_step_prediction_report, record_run, reduce_channel,
    rmse_report, save_models, simulate_black_box, sparse_from_file, split_rows, train_channels,
    write_long_format, DriverKind, EvalModels, EvalReport, TrainingRows,
};
use gpkart::sim::RunLog;
use gpkart::track::make_synthetic_track;
use log::{info, warn};
use serde::Serialize;

use crate::config::RunConfig;

pub const METADATA_FILE: &str = "metadata.json";

pub struct Context<'a> {
    pub command: &'static str,
    pub seed: Option<u64>,
    pub config: RunConfig,
    pub out: &'a Path,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    command: &'a str,
    version: &'a str,
    seed: Option<u64>,
    config_hash: String,
    inputs: Vec<String>,
    created_unix: u64,
}

impl<'a> Context<'a> {
    pub fn new(command: &'static str, seed: Option<u64>, config: RunConfig, out: &'a Path) -> Self {
        Self {
            command,
            seed,
            config,
            out,
        }
    }

    fn sidecar<T: Serialize>(&self, effective: &T, inputs: &[&Path]) -> anyhow::Result<()> {
        let meta = Sidecar {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            seed: self.seed,
            config_hash: config_hash(effective)?,
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        };
        fs::create_dir_all(self.out)?;
        fs::write(
            self.out.join(METADATA_FILE),
            serde_json::to_string_pretty(&meta)?,
        )?;
        Ok(())
    }
}

pub fn generate_track(ctx: &Context) -> anyhow::Result<()> {
    let spec = ctx.config.spec();
    let track = make_synthetic_track(&spec)?;
    fs::create_dir_all(ctx.out)?;
    let path = ctx.out.join("track.csv");
    track.save(&path)?;
    ctx.sidecar(&spec, &[])?;
    info!(
        "track of {:.2} m written to {}",
        track.length(),
        path.display()
    );
    Ok(())
}

pub fn record(
    ctx: &Context,
    laps: Option<usize>,
    driver: Option<DriverKind>,
    track_flag: Option<&Path>,
) -> anyhow::Result<()> {
    let mut cfg = ctx.config.record.clone();
    if let Some(n) = laps {
        cfg.sim.laps = Some(n);
    }
    if let Some(d) = driver {
        cfg.driver = d;
    }
    let (track, id) = ctx.config.resolve_track(track_flag)?;
    let log = record_run(&cfg, &Arc::new(track), &id)?;
    info!(
        "recorded {} samples, {} laps ({:?})",
        log.samples.len(),
        log.completed_laps(),
        log.termination
    );
    log.save(ctx.out)?;
    let inputs: Vec<&Path> = track_flag.into_iter().collect();
    ctx.sidecar(&cfg, &inputs)
}

fn append(into: &mut TrainingRows, rows: TrainingRows) {
    into.t.extend(rows.t);
    into.lap.extend(rows.lap);
    into.inputs.extend(rows.inputs);
    into.lateral.extend(rows.lateral);
    into.yaw.extend(rows.yaw);
}

pub fn train(ctx: &Context, logs: &[PathBuf]) -> anyhow::Result<()> {
    let dataset = &ctx.config.dataset;
    let mut rows = TrainingRows::default();
    for dir in logs {
        let log = RunLog::load(dir).with_context(|| format!("loading log {}", dir.display()))?;
        append(&mut rows, split_rows(&log, dataset)?.train);
    }
    let rows = rows.decimate(dataset.max_points);
    info!("training on {} rows", rows.len());
    let (lat, yaw) = rows.to_datasets()?;
    let (ml, my) = train_channels(&lat, &yaw, &ctx.config.train)?;
    info!("lateral {:?}", ml.params());
    info!("yaw {:?}", my.params());
    save_models(
        ctx.out,
        &ChannelFile::from_model("lateral", &ml),
        &ChannelFile::from_model("yaw", &my),
    )?;
    let inputs: Vec<&Path> = logs.iter().map(PathBuf::as_path).collect();
    ctx.sidecar(&(dataset, &ctx.config.train), &inputs)
}

pub fn reduce(ctx: &Context, models: &Path, threshold: Option<f64>) -> anyhow::Result<()> {
    let factor = threshold.unwrap_or(ctx.config.reduce.threshold);
    let (mut lat, mut yaw) =
        load_models(models).with_context(|| format!("loading models from {}", models.display()))?;
    let sl = reduce_channel(&mut lat, factor)?;
    let sy = reduce_channel(&mut yaw, factor)?;
    info!(
        "kept {} of {} lateral and {} of {} yaw points",
        sl.len(),
        lat.targets.len(),
        sy.len(),
        yaw.targets.len()
    );
    save_models(ctx.out, &lat, &yaw)?;
    ctx.sidecar(&factor, &[models])
}

pub fn simulate(
    ctx: &Context,
    laps: Option<usize>,
    models: Option<&Path>,
    track_flag: Option<&Path>,
) -> anyhow::Result<()> {
    let mut cfg = ctx.config.simulate.to_record();
    if let Some(n) = laps {
        cfg.sim.laps = Some(n);
    }
    let (track, id) = ctx.config.resolve_track(track_flag)?;
    let track = Arc::new(track);
    let log = match models {
        None => record_run(&cfg, &track, &id)?,
        Some(dir) => {
            let (lat, yaw) = load_models(dir)
                .with_context(|| format!("loading models from {}", dir.display()))?;
            if lat.sod_indices.is_none() || yaw.sod_indices.is_none() {
                warn!(
                    "models in {} were not reduced; using every point",
                    dir.display()
                );
            }
            let (sl, sy) = (sparse_from_file(&lat)?, sparse_from_file(&yaw)?);
            simulate_black_box(&cfg, Arc::new(sl), Arc::new(sy), &track, &id)?
        }
    };
    info!(
        "{} laps {:?} ({:?})",
        log.completed_laps(),
        log.lap_times,
        log.termination
    );
    log.save(ctx.out)?;
    let inputs: Vec<&Path> = models.into_iter().chain(track_flag).collect();
    ctx.sidecar(&cfg, &inputs)
}

pub fn evaluate(
    ctx: &Context,
    runs: &[(String, PathBuf)],
    models: Option<&Path>,
    data: Option<&Path>,
    track_flag: Option<&Path>,
) -> anyhow::Result<()> {
    if runs.is_empty() && models.is_none() {
        bail!("nothing to evaluate: pass --run and/or --models with --data");
    }
    let (track, _) = ctx.config.resolve_track(track_flag)?;
    let controller = &ctx.config.simulate.controller;
    let mut report = EvalReport::default();
    let mut logs = Vec::new();
    for (label, dir) in runs {
        let log = RunLog::load(dir).with_context(|| format!("loading run {}", dir.display()))?;
        report.laps.extend(lap_report(
            label,
            &log,
            &track,
            controller.ocp.bound_reduction,
        )?);
        if log.control.iter().any(|c| c.has_prediction) {
            report
                .one_step
                .push(one_step_prediction_report(label, &log));
        }
        logs.push((label.as_str(), log));
    }
    if let Some(dir) = models {
        let data = data.ok_or_else(|| anyhow::anyhow!("--models needs --data"))?;
        let log = RunLog::load(data).with_context(|| format!("loading log {}", data.display()))?;
        let split = split_rows(&log, &ctx.config.dataset)?;
        let rows = if split.holdout.is_empty() {
            warn!(
                "no held-out laps in {}; scoring the training rows",
                data.display()
            );
            split.train
        } else {
            split.holdout
        };
        let (lat, yaw) = load_models(dir)?;
        let (fl, fy) = (lat.to_model()?, yaw.to_model()?);
        let (sl, sy) = (sparse_from_file(&lat)?, sparse_from_file(&yaw)?);
        let plant = ctx.config.simulate.plant;
        report.rmse = rmse_report(
            &EvalModels {
                nominal: Some(&plant),
                full: Some((&fl, &fy)),
                sparse: Some((&sl, &sy)),
                t_nn: (controller.t_nn_lateral, controller.t_nn_yaw),
            },
            &rows,
        )?;
    }
    report.save(ctx.out)?;
    let refs: Vec<(&str, &RunLog)> = logs.iter().map(|(l, g)| (*l, g)).collect();
    write_long_format(&ctx.out.join("long.csv"), &refs)?;
    for s in report.summary() {
        info!("{s:?}");
    }
    for r in &report.rmse {
        info!("{r:?}");
    }
    let mut inputs: Vec<&Path> = runs.iter().map(|(_, d)| d.as_path()).collect();
    inputs.extend(models.into_iter().chain(data));
    ctx.sidecar(&(&ctx.config.dataset, controller), &inputs)
}
