//! `fera`: run federations, theory sweeps and cost tables, partition
//! datasets and inspect run outputs.
//!
//! Flags override values read from `--config` files.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fera_core::datamodel::TaskKind;
use fera_core::{AggregationMode, FederationMode};

use crate::manifest::BackendKind;

#[derive(Parser)]
#[command(
    name = "fera",
    version,
    about = "Federated reasoning runs, theory sweeps and cost accounting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a federation and write per-round snapshots plus a report.
    Run(RunArgs),
    /// Simulate the linear in-context model over an N sweep.
    Theory(TheoryArgs),
    /// Print the computation and communication cost table.
    Cost(CostArgs),
    /// Split a labeled dataset across clients by Dirichlet draw.
    Partition(PartitionArgs),
    /// Summarize a run directory, report or round snapshot.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Run manifest (TOML). Without one, the scripted ladder runs on the mock backend.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    /// Dirichlet concentration when clients are split from a pool.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<FederationMode>,
    #[arg(long)]
    aggregation: Option<AggregationMode>,
    /// Output directory, created if absent.
    #[arg(long, default_value = "fera-run")]
    out: PathBuf,
    /// Overwrite a completed run in `--out`.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TheoryArgs {
    /// Sweep spec (TOML); defaults to the N sweep over 128, 512 and 2048.
    #[arg(long)]
    config: Option<PathBuf>,
    /// First seed of the sweep.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of seeds per cell.
    #[arg(long)]
    seeds: Option<u64>,
    /// Temperature for the softmax-sigma scheme.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long, default_value = "fera-theory")]
    out: PathBuf,
}

#[derive(Args)]
struct CostArgs {
    /// Cost parameters (TOML); defaults to the bundled parameter file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for the JSON record; the table is always printed.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PartitionArgs {
    /// Labeled dataset (one JSON record per line, each with a category).
    input: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 3)]
    clients: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "multiple_choice")]
    task: TaskKind,
    #[arg(long, default_value = "fera-partition")]
    out: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    /// Run directory, `report.json` or `round_<k>.json`.
    path: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => commands::run(args),
        Command::Theory(args) => commands::theory(args),
        Command::Cost(args) => commands::cost(args),
        Command::Partition(args) => commands::partition(args),
        Command::Inspect(args) => commands::inspect(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", render_error(&e));
            ExitCode::FAILURE
        }
    }
}

/// The error chain joined by `: `, skipping causes the previous message
/// already spells out.
fn render_error(e: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut last = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !last.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
        last = text;
    }
    out
}
