use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use platewave::cli::{
    cmd_ablate, cmd_equivariance, cmd_eval, cmd_synth, cmd_train, cmd_weights, exit_code,
    parse_window, RunConfig, Scale, SynthConfig,
};
use platewave::models::{Task, Variant};
use platewave::Result;

/// Dihedral-equivariant Lamb-wave load localization and detection.
#[derive(Parser)]
#[command(name = "platewave", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Dataset file (.pwds).
    #[arg(long)]
    dataset: PathBuf,
    /// Task to train for.
    #[arg(long, default_value = "locate")]
    task: Task,
    /// Model variant.
    #[arg(long, default_value = "exact")]
    variant: Variant,
    /// Model scale.
    #[arg(long, default_value = "full")]
    scale: Scale,
    /// Comma-separated training seeds.
    #[arg(long, default_value = "0", value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Epoch budget.
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    /// Output directory for checkpoints, histories, and reports.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Ingestion window in ms, as t0:t1.
    #[arg(long)]
    window: Option<String>,
    /// Train fraction of the position-grouped split.
    #[arg(long, default_value_t = 0.8)]
    split_ratio: f64,
    /// Minibatch size.
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Rebuild the dataset with balanced damaged/undamaged classes (detect).
    #[arg(long)]
    balance: bool,
    /// Average logits instead of post-sigmoid probabilities at test time.
    #[arg(long)]
    average_logits: bool,
}

impl RunArgs {
    fn into_config(self) -> Result<RunConfig> {
        let window = self.window.as_deref().map(parse_window).transpose()?;
        Ok(RunConfig {
            dataset: self.dataset,
            task: self.task,
            variant: self.variant,
            scale: self.scale,
            seeds: self.seeds,
            epochs: self.epochs,
            out: self.out,
            window,
            split_ratio: self.split_ratio,
            batch_size: self.batch,
            balance: self.balance,
            average_logits: self.average_logits,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        /// Output dataset file (.pwds).
        #[arg(long)]
        out: PathBuf,
        /// Load positions per grid axis (default 51).
        #[arg(long)]
        grid: Option<usize>,
        /// Generation seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON file with a symmetry-break specification.
        #[arg(long)]
        sym_break: Option<PathBuf>,
        /// Override the additive noise standard deviation.
        #[arg(long)]
        noise: Option<f64>,
        /// Side of the square swept by load centers, mm.
        #[arg(long)]
        span: Option<f64>,
    },
    /// Train one run per seed and summarize across seeds.
    Train(RunArgs),
    /// Re-evaluate a trained checkpoint on its recorded test split.
    Eval {
        /// Checkpoint file (.pwck) written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate against a different dataset file.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Retrain the locator under each ingestion window.
    Ablate(RunArgs),
    /// Baseline, input, and learned equivariance-error reports.
    Equivariance {
        #[arg(long)]
        dataset: PathBuf,
        /// Checkpoint for the learned field Q(x).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Override the pre-arrival cutoff sample for R⁽⁰⁾.
        #[arg(long)]
        cutoff: Option<usize>,
    },
    /// Symmetry-weight report of an approximate-variant checkpoint.
    Weights {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            grid,
            seed,
            sym_break,
            noise,
            span,
        } => cmd_synth(&SynthConfig {
            out,
            grid,
            seed,
            sym_break,
            noise,
            span,
        }),
        Command::Train(args) => cmd_train(&args.into_config()?),
        Command::Eval {
            checkpoint,
            dataset,
        } => cmd_eval(&checkpoint, dataset.as_deref()),
        Command::Ablate(args) => cmd_ablate(&args.into_config()?),
        Command::Equivariance {
            dataset,
            checkpoint,
            out,
            cutoff,
        } => cmd_equivariance(&dataset, checkpoint.as_deref(), &out, cutoff),
        Command::Weights { checkpoint } => cmd_weights(&checkpoint),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
