//! `sdkit` entry point.

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sdkit_cli::{
    cmd_decode, cmd_decompose, cmd_encode, cmd_stats, cmd_train_sim, cmd_verify, DecodeArgs,
    DecomposeArgs, EncodeArgs, StatsArgs, TrainSimArgs, VerifyArgs,
};

#[derive(Debug, Parser)]
#[command(name = "sdkit")]
#[command(about = "re-model dense weight tensors into a sparse power-of-2 factored form")]
struct Cli {
    /// Worker threads for per-layer parallelism (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Decompose an SDTC tensor container into an SDM1 model
    Decompose(DecomposeArgs),
    /// Re-encode a decoded-model JSON back into SDM1 bytes
    Encode(EncodeArgs),
    /// Decode an SDM1 model into inspectable JSON
    Decode(DecodeArgs),
    /// Rebuild a model and check it against the original container
    Verify(VerifyArgs),
    /// Size, equivalent-FLOPs and energy reports for a model
    Stats(StatsArgs),
    /// Synthetic fine-tuning / adaptation training simulation
    TrainSim(TrainSimArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("sdkit: thread pool setup failed: {e}");
            return ExitCode::from(1);
        }
    }
    let code = match &cli.command {
        Command::Decompose(args) => cmd_decompose(args),
        Command::Encode(args) => cmd_encode(args),
        Command::Decode(args) => cmd_decode(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Stats(args) => cmd_stats(args),
        Command::TrainSim(args) => cmd_train_sim(args),
    };
    ExitCode::from(code as u8)
}
