//! `kgcp`: train embedding models, calibrate and query conformal answer-set
//! predictors, and run the coverage experiments.
//!
//! Exit codes: 0 success, 1 other failure, 2 config error, 3 training
//! diverged, 4 empty calibration split, 5 unknown name.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::PredictArgs;
use config::{Overrides, RunConfig};
use error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "kgcp", version, about = "Conformal answer sets for knowledge graph embeddings")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training and trial seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Remove known answers from candidate sets.
    #[arg(long, global = true, overrides_with = "unfiltered")]
    filtered: bool,
    #[arg(long, global = true, overrides_with = "filtered")]
    unfiltered: bool,
    /// Error rate in (0, 1).
    #[arg(long, global = true)]
    epsilon: Option<f64>,
}

impl Global {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            output_dir: self.output_dir.clone(),
            filtered: match (self.filtered, self.unfiltered) {
                (true, _) => Some(true),
                (_, true) => Some(false),
                _ => None,
            },
            epsilon: self.epsilon,
        }
    }

    fn run_config(&self) -> CliResult<RunConfig> {
        let path = self
            .config
            .as_ref()
            .ok_or_else(|| CliError::config("--config", "this command needs a run configuration"))?;
        RunConfig::load(path, &self.overrides())
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes model.ckpt and loss.csv.
    Train,
    /// Fit the configured predictors on the validation split; writes calibration.json.
    Calibrate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print the answer set of one query.
    Predict {
        /// "head relation ?" or "? relation tail"; use tabs if names contain spaces.
        #[arg(long)]
        query: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// negscore, minmax, softmax, calibrated_softmax, rank, naive, platt, topk or top<k>.
        #[arg(long)]
        predictor: Option<String>,
    },
    /// Filtered ranking metrics on the test split; writes metrics.json.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run experiment 1 (coverage and size), 2 (adaptiveness), 3
    /// (calibration size) or 4 (error-rate sweep).
    Experiment {
        #[arg(value_parser = clap::value_parser!(u8).range(1..=4))]
        which: u8,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let g = &cli.global;
    match cli.command {
        Command::Train => commands::cmd_train(&g.run_config()?),
        Command::Calibrate { checkpoint } => commands::cmd_calibrate(&g.run_config()?, checkpoint.as_deref()),
        Command::Evaluate { checkpoint } => commands::cmd_evaluate(&g.run_config()?, checkpoint.as_deref()),
        Command::Experiment { which, checkpoint } => {
            commands::cmd_experiment(&g.run_config()?, which, checkpoint.as_deref())
        }
        Command::Predict {
            query,
            checkpoint,
            calibration,
            predictor,
        } => {
            let cfg = g.config.as_ref().map(|_| g.run_config()).transpose()?;
            let out_dir = g
                .output_dir
                .clone()
                .or_else(|| cfg.as_ref().map(|c| c.output_dir.clone()))
                .unwrap_or_else(|| PathBuf::from("out"));
            let filtered = g.overrides().filtered.or(cfg.as_ref().map(|c| c.eval.filtered)).unwrap_or(false);
            let filter = match (filtered, cfg) {
                (false, _) => None,
                (true, None) => return Err(CliError::config("--filtered", "filtering needs --config for the dataset")),
                (true, Some(cfg)) => {
                    let kg = cfg.load_graph()?;
                    Some((cfg, kg))
                }
            };
            commands::cmd_predict(&PredictArgs {
                checkpoint: checkpoint.unwrap_or_else(|| out_dir.join("model.ckpt")),
                calibration: calibration.unwrap_or_else(|| out_dir.join("calibration.json")),
                query,
                predictor,
                epsilon: g.epsilon,
                filter,
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
