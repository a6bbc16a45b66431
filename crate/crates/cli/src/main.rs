//! `gpkart` command-line entry point.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "gpkart",
    version,
    about = "Learning-based MPC workflows for a simulated kart"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Args)]
struct Common {
    /// Seed for simulation noise, excitation and training minibatches.
    #[arg(long)]
    seed: Option<u64>,
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ControllerKind {
    Nominal,
    Blackbox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DriverArg {
    Nominal,
    Scripted,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the configured synthetic track to `track.csv`.
    GenerateTrack {
        #[command(flatten)]
        common: Common,
    },
    /// Record a driving log for training.
    Record {
        #[command(flatten)]
        common: Common,
        /// Stop after this many completed laps.
        #[arg(long)]
        laps: Option<usize>,
        #[arg(long, value_enum)]
        driver: Option<DriverArg>,
        /// Track file; defaults to the configured track.
        #[arg(long)]
        track: Option<PathBuf>,
    },
    /// Fit both acceleration channels to one or more logs.
    Train {
        #[command(flatten)]
        common: Common,
        /// Log directory written by `record`.
        #[arg(long = "log", required = true)]
        logs: Vec<PathBuf>,
    },
    /// Select the Subset-of-Data points of trained models.
    Reduce {
        #[command(flatten)]
        common: Common,
        /// Model directory written by `train`.
        #[arg(long)]
        models: PathBuf,
        /// Threshold as a multiple of the noise variance.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Run the closed loop with the nominal or the black-box controller.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "nominal")]
        controller: ControllerKind,
        #[arg(long)]
        laps: Option<usize>,
        /// Reduced models, required for the black-box controller.
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        track: Option<PathBuf>,
    },
    /// Compare logs and models; writes CSV tables and `summary.json`.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Closed-loop run as `label=dir`.
        #[arg(long = "run", value_parser = parse_run)]
        runs: Vec<(String, PathBuf)>,
        /// Reduced models for the acceleration RMSE table.
        #[arg(long)]
        models: Option<PathBuf>,
        /// Recorded log whose held-out laps score the models.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        track: Option<PathBuf>,
    },
}

fn parse_run(s: &str) -> Result<(String, PathBuf), String> {
    let (label, dir) = s
        .split_once('=')
        .ok_or_else(|| format!("expected label=dir, got '{s}'"))?;
    if label.is_empty() {
        return Err("empty run label".into());
    }
    Ok((label.to_string(), PathBuf::from(dir)))
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenerateTrack { .. } => "generate-track",
            Command::Record { .. } => "record",
            Command::Train { .. } => "train",
            Command::Reduce { .. } => "reduce",
            Command::Simulate { .. } => "simulate",
            Command::Evaluate { .. } => "evaluate",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenerateTrack { common }
            | Command::Record { common, .. }
            | Command::Train { common, .. }
            | Command::Reduce { common, .. }
            | Command::Simulate { common, .. }
            | Command::Evaluate { common, .. } => common,
        }
    }
}

fn run(command: &Command, config: config::RunConfig) -> anyhow::Result<()> {
    let common = command.common();
    let ctx = commands::Context::new(command.name(), common.seed, config, &common.out);
    match command {
        Command::GenerateTrack { .. } => commands::generate_track(&ctx),
        Command::Record {
            laps,
            driver,
            track,
            ..
        } => {
            let driver = driver.map(|d| match d {
                DriverArg::Nominal => gpkart::pipeline::DriverKind::Nominal,
                DriverArg::Scripted => gpkart::pipeline::DriverKind::Scripted,
            });
            commands::record(&ctx, *laps, driver, track.as_deref())
        }
        Command::Train { logs, .. } => commands::train(&ctx, logs),
        Command::Reduce {
            models, threshold, ..
        } => commands::reduce(&ctx, models, *threshold),
        Command::Simulate {
            controller,
            laps,
            models,
            track,
            ..
        } => {
            let models = match controller {
                ControllerKind::Nominal => None,
                ControllerKind::Blackbox => Some(models.as_deref().ok_or_else(|| {
                    anyhow::anyhow!("--models is required for the blackbox controller")
                })?),
            };
            commands::simulate(&ctx, *laps, models, track.as_deref())
        }
        Command::Evaluate {
            runs,
            models,
            data,
            track,
            ..
        } => commands::evaluate(
            &ctx,
            runs,
            models.as_deref(),
            data.as_deref(),
            track.as_deref(),
        ),
    }
}

fn write_diagnostic(dir: &Path, command: &str, err: &anyhow::Error) {
    let report = serde_json::json!({
        "command": command,
        "error": err.to_string(),
        "causes": err.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
    });
    let path = dir.join("error.json");
    let written = std::fs::create_dir_all(dir).and_then(|_| {
        std::fs::write(
            &path,
            serde_json::to_string_pretty(&report).unwrap_or_default(),
        )
    });
    match written {
        Ok(()) => eprintln!("diagnostics written to {}", path.display()),
        Err(e) => eprintln!("could not write {}: {e}", path.display()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    let common = cli.command.common();
    let mut config = match config::RunConfig::load(common.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    if let Some(seed) = common.seed {
        config.apply_seed(seed);
    }
    match run(&cli.command, config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            write_diagnostic(&common.out, cli.command.name(), &e);
            ExitCode::from(1)
        }
    }
}
