//! `cised`: data generation, training, evaluation and self-checks.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 when a command fails.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "cised", version, about = "Causal-intervention weakly supervised SED laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic benchmark (train, confounded and decorrelated eval splits).
    GenData(commands::GenData),
    /// Train baseline and/or ci models for a list of seeds and evaluate them.
    Train(commands::Train),
    /// Evaluate a checkpoint on the evaluation splits.
    Eval(commands::Eval),
    /// Aggregate metrics CSVs into mean ± std per variant with a ci − baseline delta.
    Compare(commands::Compare),
    /// Compare the k-pass and single-pass interventions and time both.
    ValidateOracles(commands::ValidateOracles),
    /// Finite-difference check of every operator and of the full training graph.
    GradCheck(commands::GradCheck),
}

/// Options shared by commands that read a config file.
#[derive(Debug, Args)]
pub struct ConfigArg {
    /// TOML config with [generator], [sizes], [model], [train], [metrics] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = commands::configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Compare(a) => commands::compare(a),
        Command::ValidateOracles(a) => commands::validate_oracles(a),
        Command::GradCheck(a) => commands::grad_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
