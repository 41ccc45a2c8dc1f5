//! `sio`: simulate sequences and run the self-supervised inertial odometry pipeline.
//!
//! Log verbosity follows the `SIO_LOG` environment variable (`error`, `warn`,
//! `info`, `debug`, `trace`; default `info`).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sio_app::pipeline::Stage;
use sio_app::{AppError, PipelineConfig, SimConfig};

#[derive(Parser, Debug)]
#[command(name = "sio", version, about = "Self-supervised inertial odometry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a sequence bundle with ground truth.
    Simulate {
        /// Simulator configuration (JSON); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Bundle output directory.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Register scans, solve the training pose graph and select pseudo-labels.
    PseudoLabel(StageArgs),
    /// Fit the motion-pattern mixture and class-balanced weights.
    GmmFit(StageArgs),
    /// Train the correction model on weighted pseudo-labels.
    Train(StageArgs),
    /// Apply the trained model and solve the adaptive pose graph.
    Infer(StageArgs),
    /// Compare trajectories against ground truth.
    Eval(StageArgs),
    /// Run every stage in order.
    Pipeline(StageArgs),
}

#[derive(Args, Debug)]
struct StageArgs {
    /// Sequence bundle directory.
    #[arg(long)]
    data: PathBuf,
    /// Pipeline configuration (JSON); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Artifact directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn load_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, AppError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|source| AppError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| AppError::Json {
        path: path.display().to_string(),
        source,
    })
}

fn run_stages(args: &StageArgs, stages: &[Stage]) -> Result<(), AppError> {
    let mut cfg: PipelineConfig = match &args.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let bundle = sio_app::ingest(&args.data)?;
    let metrics = sio_app::run_pipeline(&bundle, &cfg, stages, &args.out)?;
    if let Some(m) = metrics {
        println!(
            "APE  baseline {:.4} m  trained-imu {:.4} m  trained-pgo {:.4} m",
            m.baseline.ape, m.trained_imu.ape, m.trained_pgo.ape
        );
        println!(
            "RPE  baseline {:.5} m  trained-imu {:.5} m  trained-pgo {:.5} m  ({} s intervals)",
            m.baseline.rpe, m.trained_imu.rpe, m.trained_pgo.rpe, m.interval
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), AppError> {
    match cli.command {
        Command::Simulate { config, out, seed } => {
            let mut cfg: SimConfig = load_json(config.as_deref())?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let bundle = sio_app::simulate(&cfg)?;
            sio_app::export(&bundle, &out)?;
            log::info!("wrote {} scans and {} IMU samples to {}", bundle.scans.len(), bundle.imu.len(), out.display());
            Ok(())
        }
        Command::PseudoLabel(a) => run_stages(&a, &[Stage::PseudoLabel]),
        Command::GmmFit(a) => run_stages(&a, &[Stage::GmmFit]),
        Command::Train(a) => run_stages(&a, &[Stage::Train]),
        Command::Infer(a) => run_stages(&a, &[Stage::Infer]),
        Command::Eval(a) => run_stages(&a, &[Stage::Eval]),
        Command::Pipeline(a) => run_stages(&a, &Stage::ALL),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SIO_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ AppError::NoGroundTruth) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
