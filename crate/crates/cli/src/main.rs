use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use iirsnn_cli::commands;
use iirsnn_cli::RunConfig;

/// Hybrid ANN-to-SNN training with iterative timestep reduction.
#[derive(Parser)]
#[command(name = "iirsnn", version)]
struct Cli {
    /// TOML run configuration; defaults apply to anything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random draw of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Timestep schedule such as "5,3,1".
    #[arg(long, global = true)]
    stages: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the batch-normalized ANN.
    TrainAnn,
    /// Convert the trained ANN into a spiking network.
    Convert {
        #[arg(long)]
        timesteps: Option<usize>,
    },
    /// Train the converted network at a single timestep count.
    TrainSnn {
        #[arg(long)]
        timesteps: Option<usize>,
    },
    /// Convert, then train every stage of the timestep schedule.
    Iir,
    /// Evaluate a checkpoint at another timestep count without training.
    Probe {
        #[arg(long)]
        timesteps: Option<usize>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Spike rates, operation counts, energy and memory reports.
    Analyze {
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
    },
    /// Magnitude-prune a checkpoint and fine-tune the survivors.
    Prune {
        #[arg(long)]
        keep_fraction: Option<f64>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Predict the test split at the checkpoint's own timestep count.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(list) = &cli.stages {
        cfg.iir.stages = iirsnn::IirSchedule::parse(list, cfg.iir.epochs_per_stage)?.stages;
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let cfg = resolve(&cli)?;
    match cli.command {
        Command::TrainAnn => commands::train_ann_cmd(&cfg),
        Command::Convert { timesteps } => commands::convert_cmd(&cfg, timesteps),
        Command::TrainSnn { timesteps } => commands::train_snn_cmd(&cfg, timesteps),
        Command::Iir => commands::iir_cmd(&cfg),
        Command::Probe { timesteps, checkpoint } => commands::probe_cmd(&cfg, timesteps, checkpoint),
        Command::Analyze { checkpoints } => commands::analyze_cmd(&cfg, checkpoints),
        Command::Prune {
            keep_fraction,
            checkpoint,
        } => commands::prune_cmd(&cfg, keep_fraction, checkpoint),
        Command::Infer { checkpoint } => commands::infer_cmd(&cfg, checkpoint),
    }
}
