//! Binary entry point: argument parsing, worker-pool setup, and exit-code
//! mapping around the command implementations in the library.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use adanat_cli::commands;
use adanat_cli::config::{Overrides, RunConfig};
use adanat_cli::CliError;

#[derive(Parser)]
#[command(
    name = "adanat",
    version,
    about = "Adaptive-policy masked-token image generation on synthetic worlds"
)]
struct Cli {
    /// Run configuration file.
    #[arg(long, global = true, default_value = "config.toml")]
    config: PathBuf,
    /// Override the global seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel sections (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory; the ADANAT_OUT environment variable overrides
    /// this flag.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create the world file if needed and pre-train the masked-token
    /// predictor.
    Pretrain,
    /// Train the configured policy against the configured reward, then
    /// evaluate it. Static modes skip straight to evaluation.
    Train,
    /// Generate images with the trained (or static) policy and record every
    /// per-step action.
    Sample {
        /// Number of images.
        #[arg(long, default_value_t = 16)]
        n: usize,
        /// Fix the class label (default: cycle through all classes).
        #[arg(long)]
        class: Option<u32>,
    },
    /// Score samples against reference statistics and, on enumerable
    /// worlds, the exact sequence law.
    Eval {
        /// Number of fresh samples to score (default: eval.final_samples).
        #[arg(long)]
        n: Option<usize>,
        /// Score a previous sample run (directory containing tokens.csv)
        /// instead of generating.
        #[arg(long)]
        samples: Option<PathBuf>,
    },
    /// Run the policy-mode and reward grids sequentially and tabulate the
    /// results.
    Ablate,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let overrides = Overrides { seed: cli.seed, out: cli.out, workers: cli.workers };
    let cfg = RunConfig::load(&cli.config, &overrides)?;
    if cfg.output.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.output.workers)
            .build_global()
            .map_err(|e| CliError::Config(format!("worker pool: {e}")))?;
    }
    match cli.command {
        Command::Pretrain => commands::cmd_pretrain(&cfg),
        Command::Train => commands::cmd_train(&cfg).map(|_| ()),
        Command::Sample { n, class } => commands::cmd_sample(&cfg, n, class),
        Command::Eval { n, samples } => {
            commands::cmd_eval(&cfg, n, samples.as_deref()).map(|_| ())
        }
        Command::Ablate => commands::cmd_ablate(&cfg),
    }
}

fn main() {
    match run(Cli::parse()) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
