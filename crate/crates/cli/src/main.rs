//! `flowgraph`: ingest captures, select stable attributes, train, evaluate
//! and apply packet-graph traffic classifiers.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flowgraph_core::Error as CoreError;

use commands::{EvaluateArgs, GroupBy, PredictArgs, ShiftArgs, SynthKind, TrainArgs};
use config::{Settings, UsageError};

#[derive(Debug, Parser)]
#[command(name = "flowgraph", version, about = "Packet-graph classification of encrypted traffic")]
struct Cli {
    /// TOML file with default settings; flags take precedence.
    #[arg(long, global = true, value_name = "TOML")]
    config: Option<PathBuf>,
    #[command(flatten)]
    settings: Settings,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse the captures listed in a manifest into a flow dataset.
    Ingest {
        /// CSV with columns path,label,environment_label.
        #[arg(long)]
        manifest: PathBuf,
        /// Output flow dataset (JSON lines).
        #[arg(long)]
        out: PathBuf,
    },
    /// Score attribute stability across environments and pick a feature set.
    SelectFeatures {
        #[arg(long)]
        flows: PathBuf,
        /// Per-attribute divergence table.
        #[arg(long)]
        out_csv: PathBuf,
        #[arg(long)]
        out_features: PathBuf,
    },
    /// Train a classifier and write a checkpoint.
    Train {
        #[arg(long)]
        flows: PathBuf,
        /// Feature set file; all attributes when omitted.
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch training log (JSON).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Cross-validate on a dataset, or score a checkpoint against one.
    Evaluate {
        #[arg(long)]
        flows: PathBuf,
        /// Score this checkpoint instead of cross-validating.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Cross-validation only: also retrain without this class and
        /// measure how its flows fare against the threshold.
        #[arg(long, conflicts_with = "checkpoint")]
        held_out: Option<String>,
        /// Checkpoint only: treat flows of unseen classes as unknowns.
        #[arg(long, requires = "checkpoint")]
        open_world: bool,
        #[arg(long)]
        out: PathBuf,
        /// Confusion matrix CSV.
        #[arg(long)]
        confusion: Option<PathBuf>,
    },
    /// Classify flows with a checkpoint and write one CSV row per flow.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        flows: PathBuf,
        /// Report UNKNOWN when the top probability is below the threshold.
        #[arg(long)]
        open_world: bool,
        /// Output CSV; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare two groups of flows by packet distance to the first group's centroid.
    ShiftAnalyze {
        #[arg(long)]
        flows: PathBuf,
        #[arg(long, value_enum, default_value = "environment")]
        by: GroupBy,
        #[arg(long)]
        group_a: String,
        #[arg(long)]
        group_b: String,
        #[arg(long)]
        features: Option<PathBuf>,
        /// Density grid points.
        #[arg(long, default_value_t = 256)]
        grid: usize,
        /// Density CSV.
        #[arg(long)]
        out: PathBuf,
        /// Raw per-packet distances CSV.
        #[arg(long)]
        distances: Option<PathBuf>,
    },
    /// Generate synthetic labeled traffic.
    Synth {
        #[arg(value_enum)]
        kind: SynthKind,
        /// Output directory (structural) or flow dataset (shift).
        #[arg(long)]
        out: PathBuf,
        /// Flows per class (structural) or per class and environment (shift).
        #[arg(long, default_value_t = 40)]
        count: usize,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = match &cli.config {
        Some(path) => Settings::from_file(path)?,
        None => Settings::default(),
    };
    let pipeline = cli.settings.or(file).resolve()?;
    match cli.command {
        Command::Ingest { manifest, out } => commands::ingest(&pipeline, &manifest, &out),
        Command::SelectFeatures { flows, out_csv, out_features } => {
            commands::select_features(&pipeline, &flows, &out_csv, &out_features)
        }
        Command::Train { flows, features, out, log } => commands::train_model(
            &pipeline,
            TrainArgs { flows: &flows, features: features.as_deref(), out: &out, log: log.as_deref() },
        ),
        Command::Evaluate { flows, checkpoint, held_out, open_world, out, confusion } => commands::evaluate(
            &pipeline,
            EvaluateArgs {
                flows: &flows,
                checkpoint: checkpoint.as_deref(),
                held_out: held_out.as_deref(),
                open_world,
                out: &out,
                confusion: confusion.as_deref(),
            },
        ),
        Command::Predict { checkpoint, flows, open_world, out } => commands::predict(
            &pipeline,
            PredictArgs { flows: &flows, checkpoint: &checkpoint, open_world, out: out.as_deref() },
        ),
        Command::ShiftAnalyze { flows, by, group_a, group_b, features, grid, out, distances } => {
            commands::shift_analyze(ShiftArgs {
                flows: &flows,
                by,
                group_a: &group_a,
                group_b: &group_b,
                features: features.as_deref(),
                grid,
                out: &out,
                distances: distances.as_deref(),
            })
        }
        Command::Synth { kind, out, count } => commands::synth(&pipeline, kind, &out, count),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<CoreError>() {
        Some(CoreError::Config(_)) => 1,
        Some(CoreError::Contract(_)) | None => 3,
        Some(_) => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
