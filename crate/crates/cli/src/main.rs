use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "eden", version, about = "Latent diffusion frame interpolation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Where outputs go; falls back to `EDEN_OUTPUT_DIR`, then the config's
/// `output_dir`.
#[derive(Args, Debug, Clone)]
struct OutDir {
    #[arg(long, env = "EDEN_OUTPUT_DIR")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct Overrides {
    /// Root seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Total training steps for the selected stage.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct ModelCkpts {
    #[arg(long)]
    tokenizer_ckpt: PathBuf,
    #[arg(long)]
    dit_ckpt: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render (or index) sequences and write frame directories, a triplet list and statistics.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        out: OutDir,
    },
    TrainTokenizer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Continue from a checkpoint written by this stage.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stage-1 checkpoint to fine-tune in stage 2 (default: the stage-1 output).
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
        #[command(flatten)]
        out: OutDir,
    },
    TrainDit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        tokenizer_ckpt: PathBuf,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
        #[command(flatten)]
        out: OutDir,
    },
    /// Generate the middle frame between two PNGs.
    Interpolate {
        #[command(flatten)]
        ckpts: ModelCkpts,
        #[arg(long)]
        i0: PathBuf,
        #[arg(long)]
        i1: PathBuf,
        #[arg(long, default_value_t = eden_core::diffusion::DEFAULT_STEPS)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output PNG (default: `interpolated.png` in `EDEN_OUTPUT_DIR`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score interpolations of a triplet list.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        ckpts: ModelCkpts,
        #[arg(long)]
        triplets: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Output CSV (default: `eval.csv` in the output directory).
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        out: OutDir,
    },
    /// Metrics across denoising step counts.
    SweepSteps {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        ckpts: ModelCkpts,
        #[arg(long)]
        triplets: PathBuf,
        /// Comma-separated step counts (default: the config's eval.steps).
        #[arg(long, value_delimiter = ',')]
        steps_list: Option<Vec<usize>>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        out: OutDir,
    },
    /// Metrics across start/end spacing on the configured sequences.
    SweepIntervals {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        ckpts: ModelCkpts,
        /// Comma-separated intervals (default: the config's eval.intervals).
        #[arg(long, value_delimiter = ',')]
        intervals: Option<Vec<usize>>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        out: OutDir,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::FAILURE
        }
    }
}
