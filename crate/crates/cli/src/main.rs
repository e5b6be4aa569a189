//! `grasp`: dataset generation, training, evaluation and analysis.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "grasp",
    version,
    about = "SDF-gated shape priors for amodal segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base seed for every stage.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic occlusion dataset.
    Gen(commands::GenArgs),
    /// Train a model on a generated dataset.
    Train(commands::TrainArgs),
    /// Evaluate a checkpoint.
    Eval(commands::EvalArgs),
    /// Compare the learned gate against constant gates 0, 0.5 and 1.
    Ablate(commands::AblateArgs),
    /// Fit linear probes from token features to the pooled SDF.
    Probe(commands::ProbeArgs),
    /// Gate and prototype-attention statistics.
    Stats(commands::StatsArgs),
    /// Dump the SDF and gate map of one mask image.
    Sdf(commands::SdfArgs),
}

fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("GRASP_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("GRASP_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = configure_threads() {
        eprintln!("error[config]: {msg}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Probe(a) => commands::probe(a),
        Command::Stats(a) => commands::stats(a),
        Command::Sdf(a) => commands::sdf(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .downcast_ref::<grasp::GraspError>()
                .map(|g| g.kind())
                .unwrap_or("other");
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{kind}]: {msg}");
            ExitCode::from(if kind == "config" { 2 } else { 1 })
        }
    }
}
