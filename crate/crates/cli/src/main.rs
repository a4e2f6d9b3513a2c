mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "wavemae", version, about = "Wavelet masked-autoencoder pipeline for multi-channel biosignals")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Global {
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// 64-bit arithmetic everywhere (slower, bit-reproducible).
    #[arg(long, global = true)]
    pub f64: bool,
    /// Override one config key, e.g. `--set dim=128`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labelled synthetic corpus.
    Synth(commands::SynthArgs),
    /// Filter, resample and window a recording into a container.
    Preprocess(commands::PreprocessArgs),
    /// Masked-reconstruction pretraining.
    Pretrain(commands::PretrainArgs),
    /// Supervised fine-tuning of an encoder plus classification head.
    Finetune(commands::FinetuneArgs),
    /// Linear probing and late fusion over frozen encoders and external logits.
    Fuse(commands::FuseArgs),
    /// Export reconstruction, mask, subband-map and fusion-weight CSVs.
    Inspect(commands::InspectArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    match cli.command {
        Command::Synth(a) => commands::synth(g, &a),
        Command::Preprocess(a) => commands::preprocess(g, &a),
        Command::Pretrain(a) => commands::pretrain(g, &a),
        Command::Finetune(a) => commands::finetune(g, &a),
        Command::Fuse(a) => commands::fuse(g, &a),
        Command::Inspect(a) => commands::inspect(g, &a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
