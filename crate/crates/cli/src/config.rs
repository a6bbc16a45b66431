use std::path::{Path, PathBuf};

use anyhow::Context;
use gpkart::gp::TrainConfig;
use gpkart::pipeline::{config_hash, DatasetConfig, DriverKind, RecordConfig, TargetSource};
use gpkart::plant::PlantParams;
use gpkart::reduce::DEFAULT_SOD_THRESHOLD;
use gpkart::sim::SimConfig;
use gpkart::sqp::ControllerConfig;
use gpkart::track::{make_synthetic_track, Track, TrackSpec};
use serde::{Deserialize, Serialize};

/// Closed-loop settings of `simulate`; no excitation is applied.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub sim: SimConfig,
    pub plant: PlantParams,
    pub controller: ControllerConfig,
}

impl SimulateConfig {
    pub fn to_record(&self) -> RecordConfig {
        RecordConfig {
            driver: DriverKind::Nominal,
            sim: self.sim.clone(),
            plant: self.plant,
            controller: self.controller.clone(),
            dither: None,
            ..RecordConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReduceConfig {
    /// Variance threshold as a multiple of the noise variance.
    pub threshold: f64,
}

impl Default for ReduceConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_SOD_THRESHOLD,
        }
    }
}

/// Everything a workflow can be configured with. Missing sections take their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Track file written by `generate-track`; takes priority over `track`.
    pub track_file: Option<PathBuf>,
    pub track: Option<TrackSpec>,
    pub record: RecordConfig,
    pub simulate: SimulateConfig,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub reduce: ReduceConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut config: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        // relative track paths are resolved against the config file
        if let (Some(file), Some(dir)) = (&config.track_file, path.parent()) {
            if file.is_relative() {
                config.track_file = Some(dir.join(file));
            }
        }
        Ok(config)
    }

    /// Applies `--seed` to every seeded stage.
    pub fn apply_seed(&mut self, seed: u64) {
        self.record.sim.seed = seed;
        self.simulate.sim.seed = seed;
        self.train.seed = seed;
        if let TargetSource::Smoothed { seed: s, .. } = &mut self.dataset.source {
            *s = seed;
        }
    }

    pub fn spec(&self) -> TrackSpec {
        self.track
            .clone()
            .unwrap_or_else(TrackSpec::default_circuit)
    }

    /// The configured track and an identifier for run metadata.
    pub fn resolve_track(&self, flag: Option<&Path>) -> anyhow::Result<(Track, String)> {
        if let Some(path) = flag.or(self.track_file.as_deref()) {
            let track =
                Track::load(path).with_context(|| format!("loading track {}", path.display()))?;
            let id = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string());
            return Ok((track, id));
        }
        let spec = self.spec();
        let track = make_synthetic_track(&spec)?;
        Ok((track, format!("synthetic-{}", &config_hash(&spec)?[..12])))
    }
}
