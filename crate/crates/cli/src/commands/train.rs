use std::io::Write;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use vqkv_core::trainer::train;
use vqkv_core::{CodebookStack, TrainConfig, TrainReport, VectorDataset};

use super::{emit, KindArg};

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Codebook sizes, one per stage: `256,256,256`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub stages: Vec<usize>,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    pub lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    pub batch: usize,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().beta)]
    pub beta: f64,
    #[arg(long, default_value_t = TrainConfig::default().gamma)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = TrainConfig::default().init_scale)]
    pub init_scale: f64,
    #[arg(long, value_enum, default_value_t = KindArg::Key)]
    pub kind: KindArg,
    /// Use `||r - e||^2` for the commitment term.
    #[arg(long)]
    pub square_commitment: bool,
    /// Also train the raw codebook entries.
    #[arg(long)]
    pub train_entries: bool,
    #[arg(long)]
    pub out: PathBuf,
}

impl TrainArgs {
    pub fn config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            batch_size: self.batch,
            epochs: self.epochs,
            beta: self.beta,
            gamma: self.gamma,
            seed: self.seed,
            init_scale: self.init_scale,
            square_commitment: self.square_commitment,
            train_entries: self.train_entries,
        }
    }
}

pub fn run(args: &TrainArgs, out: &mut dyn Write) -> Result<(CodebookStack, TrainReport)> {
    let dataset = VectorDataset::load(&args.data)
        .with_context(|| format!("reading {}", args.data.display()))?;
    let (stack, report) = train(&dataset, &args.stages, args.kind.into(), &args.config())?;
    stack
        .save(&args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    emit(out, &report)?;
    Ok((stack, report))
}
