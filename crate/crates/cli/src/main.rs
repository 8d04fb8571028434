//! `slotfill` command-line tool.
//!
//! Exit status: 0 on success, 1 on runtime failure, 2 on bad input or
//! configuration.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use slotfill::corpus::DatasetFormat;

use crate::config::{extract_overrides, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "slotfill",
    version,
    about = "Slot filling conditioned on slot descriptions and example values"
)]
#[command(
    after_help = "Configuration fields can be overridden with --section.key=value, e.g. --train.total_steps=200."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a dataset to native JSON Lines.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "native")]
        format: DatasetFormat,
        #[arg(long)]
        output: PathBuf,
        /// Also write the inferred schema registry.
        #[arg(long)]
        schemas_out: Option<PathBuf>,
    },
    /// Train a model from an experiment config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "native")]
        format: DatasetFormat,
        #[arg(long)]
        schemas: Option<PathBuf>,
        /// Training data whose span values may serve as examples.
        #[arg(long)]
        train_dataset: Option<PathBuf>,
        #[arg(long, short, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Tag one utterance and print the spans as JSON.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long)]
        schemas: Option<PathBuf>,
        #[arg(long)]
        intent: Option<String>,
        #[arg(long)]
        slot: Option<String>,
        #[arg(long)]
        description: Option<String>,
        /// Example value (repeatable).
        #[arg(long = "example")]
        examples: Vec<String>,
        #[arg(long, short, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the protocol grid and write report, table and CSV.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// CSV destination (default: <output_dir>/sweep.csv).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Exact-span F1 of predicted frames against gold frames.
    F1 {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, default_value = "native")]
        format: DatasetFormat,
    },
    /// Generate a synthetic corpus (preset toy|transfer|collision or a spec file).
    Synth {
        #[arg(long, default_value = "toy")]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        frames_per_intent: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli, overrides: &[(String, String)]) -> slotfill::Result<()> {
    match cli.command {
        Command::Convert {
            input,
            format,
            output,
            schemas_out,
        } => commands::convert(&input, format, &output, schemas_out.as_deref()),
        Command::Train { config, resume } => commands::train(
            &ExperimentConfig::load(config.as_deref(), overrides)?,
            resume,
        ),
        Command::Eval {
            checkpoint,
            dataset,
            format,
            schemas,
            train_dataset,
            k,
            seed,
            output,
        } => commands::eval(&commands::EvalArgs {
            checkpoint: &checkpoint,
            dataset: &dataset,
            format,
            schemas: schemas.as_deref(),
            train_dataset: train_dataset.as_deref(),
            k,
            seed,
            output: output.as_deref(),
        }),
        Command::Predict {
            checkpoint,
            text,
            schemas,
            intent,
            slot,
            description,
            examples,
            k,
            seed,
        } => commands::predict(&commands::PredictArgs {
            checkpoint: &checkpoint,
            text: &text,
            schemas: schemas.as_deref(),
            intent: intent.as_deref(),
            slot: slot.as_deref(),
            description: description.as_deref(),
            examples: &examples,
            k,
            seed,
        }),
        Command::Sweep { config, output } => commands::sweep(
            &ExperimentConfig::load(config.as_deref(), overrides)?,
            output.as_deref(),
        ),
        Command::F1 { gold, pred, format } => commands::f1(&gold, &pred, format),
        Command::Synth {
            preset,
            seed,
            frames_per_intent,
            out,
        } => commands::synth(&preset, seed, frames_per_intent, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let (args, overrides) = extract_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 1 })
        }
    }
}
