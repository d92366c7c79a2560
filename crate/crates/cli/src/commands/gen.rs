use std::io::Write;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;
use vqkv_core::synth::generate;
use vqkv_core::{SyntheticSpec, VectorDataset};

use super::{emit, SpecArgs};

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct GenSummary {
    pub path: PathBuf,
    pub spec: SyntheticSpec,
}

pub fn run(args: &GenArgs, out: &mut dyn Write) -> Result<VectorDataset> {
    let spec = args.spec.to_spec(args.count);
    let dataset = VectorDataset::new(generate(&spec)?)?;
    dataset
        .save(&args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    emit(
        out,
        &GenSummary {
            path: args.out.clone(),
            spec,
        },
    )?;
    Ok(dataset)
}
