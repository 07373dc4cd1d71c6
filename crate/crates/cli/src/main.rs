//! `doe-lab`: train, evaluate, sweep, certify and report.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 spec error, 3 verification
//! failure. Errors go to stderr as one line of JSON.

mod commands;
mod error;
mod report;
mod spec;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use doe_core::detection::Scorer;

use crate::commands::EvalArgs;
use crate::error::CliError;
use crate::spec::GridAxis;

#[derive(Debug, Parser)]
#[command(name = "doe-lab", version, about = "Outlier-exposure experiments with worst-case weight perturbation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model and write checkpoint, history, resolved config and evaluation.
    Train {
        spec: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Score a checkpoint on every test split of a dataset manifest.
    Eval {
        checkpoint: PathBuf,
        manifest: PathBuf,
        #[arg(long, default_value = "maxlogit")]
        scorer: Scorer,
        #[arg(long, default_value_t = 40)]
        bins: usize,
        /// Label for the report; read from the checkpoint's resolved config when absent.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for per-split histogram CSVs.
        #[arg(long)]
        hist_dir: Option<PathBuf>,
    },
    /// Sweep the Cartesian product of grid axes over seeds; prints the row table as CSV.
    Ablate {
        spec: PathBuf,
        /// `key=v1,v2,…`; repeat for more axes. Bare keys address [trainer].
        #[arg(long = "grid")]
        grid: Vec<GridAxis>,
        /// Comma-separated seeds; defaults to eval.seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Directory for rows.csv, summary.csv and summary.md.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the perturbation-theory certification and print its JSON summary.
    Verify {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use the deliberately broken composition rule.
        #[arg(long, hide = true)]
        faulty_rule: bool,
    },
    /// Aggregate evaluation JSON files and row CSVs into Markdown tables.
    Report {
        inputs: Vec<PathBuf>,
        /// Directory for report.md, summary.csv and histogram CSVs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the gap benchmark as CSV files plus a manifest.
    Generate {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a shipped spec preset, or list them.
    Preset { name: Option<String> },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { spec, seed, out } => commands::train(&spec, seed, &out),
        Command::Eval {
            checkpoint,
            manifest,
            scorer,
            bins,
            variant,
            seed,
            out,
            hist_dir,
        } => commands::eval(EvalArgs {
            checkpoint: &checkpoint,
            manifest: &manifest,
            scorer,
            bins,
            variant,
            seed,
            out: out.as_deref(),
            hist_dir: hist_dir.as_deref(),
        }),
        Command::Ablate { spec, grid, seeds, out } => commands::ablate(&spec, &grid, seeds, out.as_deref()),
        Command::Verify {
            trials,
            seed,
            faulty_rule,
        } => commands::verify(trials, seed, faulty_rule),
        Command::Report { inputs, out } => commands::report(&inputs, out.as_deref()),
        Command::Generate { spec, seed, out } => commands::generate(spec.as_deref(), seed, &out),
        Command::Preset { name } => commands::show_preset(name.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}
