//! `rem`: RSRP prediction and radio environment maps from building and
//! terrain data.

mod commands;
mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{EvaluateArgs, PredictorName, RemOverrides, Subset, SynthOverrides, TrainOverrides};
use config::RunConfig;
use manifest::Run;
use rem_core::Error;

#[derive(Debug, Parser)]
#[command(name = "rem", version = config::version(), about = "LTE RSRP prediction and radio environment maps")]
struct Cli {
    /// Seed for every random choice; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON run configuration; flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a scenario and terrain and write a self-contained bundle.
    Ingest {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        terrain: PathBuf,
        /// Optional building height raster (ESRI ASCII grid).
        #[arg(long)]
        heights: Option<PathBuf>,
    },
    /// Fit each cell's EIRP from measurements against the UMa baseline.
    FitEirp {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        measurements: PathBuf,
    },
    /// Generate a synthetic scenario with ground-truth measurements.
    Synth {
        #[arg(long)]
        buildings: Option<usize>,
        #[arg(long)]
        cells: Option<usize>,
        /// Measurement noise standard deviation in dB.
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        n_measurements: Option<usize>,
        #[arg(long)]
        width: Option<f64>,
        #[arg(long)]
        height: Option<f64>,
    },
    /// Extract training samples (image, features, target) for each measurement.
    Extract {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        measurements: PathBuf,
    },
    /// Train the correction network on an extracted dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Early-stopping patience in epochs; 0 disables it.
        #[arg(long)]
        patience: Option<usize>,
    },
    /// Predict RSRP at each measurement position.
    Predict {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        measurements: PathBuf,
        #[arg(long, default_value = "uma-b")]
        predictor: PredictorName,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Generate a radio environment map on a regular grid.
    Rem {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value = "uma-b")]
        predictor: PredictorName,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Grid spacing in metres.
        #[arg(long)]
        resolution: Option<f64>,
        /// Receiver height above ground in metres.
        #[arg(long)]
        rx_height: Option<f64>,
        /// Leave cells inside buildings without coverage.
        #[arg(long)]
        outdoor_only: bool,
        /// Comma-separated cell ids (default: all cells).
        #[arg(long, value_delimiter = ',')]
        cells: Vec<String>,
    },
    /// Compare predictors against measurements.
    Evaluate {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        measurements: PathBuf,
        /// Comma-separated predictor names (default: all analytical models, plus
        /// dragon when a checkpoint is given).
        #[arg(long, value_delimiter = ',')]
        predictors: Vec<PredictorName>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Prediction CSV aligned row by row with the measurements.
        #[arg(long)]
        predictions: Vec<PathBuf>,
        /// Split indices written by `rem train`.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, default_value = "all")]
        subset: Subset,
    },
    /// Seeded random search over training hyperparameters.
    Search {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        trials: Option<usize>,
        /// Epoch budget per trial.
        #[arg(long)]
        epochs: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::FitEirp { .. } => "fit-eirp",
            Command::Synth { .. } => "synth",
            Command::Extract { .. } => "extract",
            Command::Train { .. } => "train",
            Command::Predict { .. } => "predict",
            Command::Rem { .. } => "rem",
            Command::Evaluate { .. } => "evaluate",
            Command::Search { .. } => "search",
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric { .. } | Error::Training { .. } | Error::Shape(_) | Error::DegeneratePath(_) => 3,
        _ => 2,
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> rem_core::Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seed = seed.unwrap_or(cfg.seed);
    let cfg = cfg.with_seed(seed);
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> rem_core::Result<()> {
    let mut cfg = load_config(cli.config.as_deref(), cli.seed)?;
    let mut run = Run::new(&cli.out)?;
    if let Some(c) = &cli.config {
        run.input(c)?;
    }
    log::info!("rem {} {}", config::version(), cli.command.name());
    log::debug!("effective config: {}", cfg.to_json());
    match &cli.command {
        Command::Ingest {
            scenario,
            terrain,
            heights,
        } => commands::ingest(&mut run, scenario, terrain, heights.as_deref())?,
        Command::FitEirp { bundle, measurements } => commands::fit_eirp(&mut run, &cfg, bundle, measurements)?,
        Command::Synth {
            buildings,
            cells,
            sigma,
            n_measurements,
            width,
            height,
        } => {
            let o = SynthOverrides {
                buildings: *buildings,
                cells: *cells,
                sigma: *sigma,
                n_measurements: *n_measurements,
                width: *width,
                height: *height,
            };
            commands::synth(&mut run, &mut cfg, &o)?
        }
        Command::Extract { bundle, measurements } => commands::extract(&mut run, bundle, measurements)?,
        Command::Train {
            dataset,
            epochs,
            batch_size,
            lr,
            patience,
        } => {
            let o = TrainOverrides {
                epochs: *epochs,
                batch_size: *batch_size,
                learning_rate: *lr,
                patience: *patience,
            };
            commands::train_cmd(&mut run, &mut cfg, dataset, &o)?
        }
        Command::Predict {
            bundle,
            measurements,
            predictor,
            checkpoint,
        } => commands::predict(&mut run, &cfg, bundle, measurements, *predictor, checkpoint.as_deref())?,
        Command::Rem {
            bundle,
            predictor,
            checkpoint,
            resolution,
            rx_height,
            outdoor_only,
            cells,
        } => {
            let o = RemOverrides {
                resolution: *resolution,
                rx_height: *rx_height,
                outdoor_only: *outdoor_only,
                cells: cells.clone(),
            };
            commands::rem(&mut run, &mut cfg, bundle, *predictor, checkpoint.as_deref(), &o)?
        }
        Command::Evaluate {
            bundle,
            measurements,
            predictors,
            checkpoint,
            predictions,
            split,
            subset,
        } => {
            let a = EvaluateArgs {
                bundle,
                measurements,
                predictors,
                checkpoint: checkpoint.as_deref(),
                predictions,
                split: split.as_deref(),
                subset: *subset,
            };
            commands::evaluate_cmd(&mut run, &cfg, &a)?
        }
        Command::Search { dataset, trials, epochs } => commands::search(&mut run, &mut cfg, dataset, *trials, *epochs)?,
    }
    let manifest = run.finish(cli.command.name(), cli.config.as_deref(), &cfg)?;
    log::info!("manifest written to {}", manifest.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} worker threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
