pub mod bench;
pub mod compress;
pub mod gen;
pub mod ratio;
pub mod stats;
pub mod train;

use std::io::Write;

use anyhow::Result;
use clap::{Args, ValueEnum};
use serde::Serialize;
use vqkv_core::{CacheKind, SyntheticKind, SyntheticSpec};

/// Writes `value` as one JSON line.
pub fn emit(out: &mut dyn Write, value: &impl Serialize) -> Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DataKind {
    GaussianMixture,
    RopeRotatedKeys,
}

impl From<DataKind> for SyntheticKind {
    fn from(kind: DataKind) -> Self {
        match kind {
            DataKind::GaussianMixture => SyntheticKind::GaussianMixture,
            DataKind::RopeRotatedKeys => SyntheticKind::RopeRotatedKeys,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Key,
    Value,
}

impl From<KindArg> for CacheKind {
    fn from(kind: KindArg) -> Self {
        match kind {
            KindArg::Key => CacheKind::Key,
            KindArg::Value => CacheKind::Value,
        }
    }
}

/// Synthetic data description shared by `gen` and `bench`.
#[derive(Debug, Clone, Args)]
pub struct SpecArgs {
    #[arg(long, value_enum, default_value_t = DataKind::GaussianMixture)]
    pub kind: DataKind,
    #[arg(long)]
    pub dim: usize,
    #[arg(long, default_value_t = 8)]
    pub components: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10_000.0)]
    pub rope_base: f64,
    #[arg(long, default_value_t = 0.3)]
    pub cluster_std: f64,
    /// Sample stream; different streams share component means.
    #[arg(long, default_value_t = 0)]
    pub stream: u64,
}

impl SpecArgs {
    pub fn to_spec(&self, count: usize) -> SyntheticSpec {
        SyntheticSpec {
            kind: self.kind.into(),
            dim: self.dim,
            count,
            components: self.components,
            seed: self.seed,
            rope_base: self.rope_base,
            cluster_std: self.cluster_std,
            stream: self.stream,
        }
    }
}
