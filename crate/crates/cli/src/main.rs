use std::io::{self, Write};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vqkv_cli::commands::{bench, compress, gen, ratio, stats, train};

/// Vector-quantized KV-cache tools.
#[derive(Debug, Parser)]
#[command(name = "vqkv", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compression ratio of a codebook configuration.
    Ratio(ratio::RatioArgs),
    /// Generate a synthetic dataset.
    Gen(gen::GenArgs),
    /// Train a codebook stack on a dataset.
    Train(train::TrainArgs),
    /// Encode a dataset with a trained stack.
    Compress(compress::CompressArgs),
    /// Ratio table for configurations, or memory report of a snapshot.
    Stats(stats::StatsArgs),
    /// Simulated prefill/decode run with memory and fidelity reports.
    Bench(bench::BenchArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let result = match &cli.command {
        Command::Ratio(args) => ratio::run(args, &mut out).map(drop),
        Command::Gen(args) => gen::run(args, &mut out).map(drop),
        Command::Train(args) => train::run(args, &mut out).map(drop),
        Command::Compress(args) => compress::run(args, &mut out).map(drop),
        Command::Stats(args) => stats::run(args, &mut out).map(drop),
        Command::Bench(args) => bench::run(args, &mut out).map(drop),
    };
    let _ = out.flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("vqkv: {err:#}");
            ExitCode::FAILURE
        }
    }
}
