mod commands;
mod config;
mod report;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use crate::config::{Overrides, DATA_ENV};

#[derive(Parser)]
#[command(name = "csunfold", version, about = "Block compressive sensing with a penalty-based unfolding network")]
struct Cli {
    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// TOML run configuration with [data], [train], [ablation] and [report] tables.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Dataset directory. Falls back to data.root in the config, then to the environment.
    #[arg(long, long_help = format!("Dataset directory. Falls back to data.root in the config, then to ${DATA_ENV}."))]
    data: Option<PathBuf>,

    /// Measurement ratio m/n.
    #[arg(long)]
    ratio: Option<f64>,

    /// Number of reconstruction modules K.
    #[arg(short = 'K', long)]
    modules: Option<usize>,

    #[arg(long)]
    seed: Option<u64>,

    /// buffer_mean, per_sample_zero_init or shared.
    #[arg(long, value_parser = parse_snake::<csunfold::unfolding::LambdaMode>)]
    lambda_mode: Option<csunfold::unfolding::LambdaMode>,

    /// detached or end2end.
    #[arg(long, value_parser = parse_snake::<csunfold::unfolding::Coupling>)]
    coupling: Option<csunfold::unfolding::Coupling>,

    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    overwrite: bool,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            data: self.data.clone(),
            ratio: self.ratio,
            modules: self.modules,
            seed: self.seed,
            lambda_mode: self.lambda_mode,
            coupling: self.coupling,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Measure every image in the dataset and write a measurement archive.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Take the sampling matrix from a checkpoint instead of a fresh seeded one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train a model; writes last/best checkpoints and the metrics history.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Per-image and mean PSNR/SSIM of a checkpoint on a folder of images.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reconstruct images, or the records of a measurement archive.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reconstruct from this archive instead of measuring the dataset.
        #[arg(long)]
        archive: Option<PathBuf>,
    },
    /// Run the ablation suites named in the config.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Markdown tables and a PSNR-vs-ratio plot from stored runs.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Directories searched recursively for training histories and ablation tables.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn parse_snake<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_secs()
        .init();
    match cli.command {
        Command::Sample { common, out, checkpoint } => {
            commands::sample(&commands::load_config(&common)?, &out, common.overwrite, checkpoint.as_deref())
        }
        Command::Train { common, out, checkpoint } => {
            commands::train(&commands::load_config(&common)?, &out, common.overwrite, checkpoint.as_deref())
        }
        Command::Eval { common, checkpoint, out } => {
            commands::eval(&commands::load_config(&common)?, &checkpoint, out.as_deref(), common.overwrite)
        }
        Command::Reconstruct {
            common,
            checkpoint,
            out,
            archive,
        } => commands::reconstruct(
            &commands::load_config(&common)?,
            &checkpoint,
            &out,
            common.overwrite,
            archive.as_deref(),
        ),
        Command::Ablate { common, out } => commands::ablate(&commands::load_config(&common)?, &out, common.overwrite),
        Command::Report { common, out, runs } => {
            report::report(&commands::load_config(&common)?, &runs, &out, common.overwrite)
        }
    }
}
