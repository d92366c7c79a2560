use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Args;
use serde::Serialize;
use vqkv_core::cache::SegmentLengths;
use vqkv_core::ratio::RatioConfig;
use vqkv_core::{CacheSnapshot, MemoryReport};

use super::{emit, ratio::render};

#[derive(Debug, Clone, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["configs", "snapshot"])))]
pub struct StatsArgs {
    /// `nk,sk,nv,sv[,dk,dv]`; repeat for a table.
    #[arg(long = "config", value_parser = parse_config)]
    pub configs: Vec<RatioConfig>,
    /// Report on a saved cache snapshot instead.
    #[arg(long)]
    pub snapshot: Option<PathBuf>,
    #[arg(long)]
    pub full_precision: bool,
}

pub fn parse_config(text: &str) -> std::result::Result<RatioConfig, String> {
    let fields = text
        .split(',')
        .map(|f| f.trim().parse::<u64>().map_err(|e| format!("{f:?}: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let cfg = match fields[..] {
        [nk, sk, nv, sv] => RatioConfig::new(nk, sk, nv, sv),
        [nk, sk, nv, sv, dk, dv] => RatioConfig::with_dims(nk, sk, nv, sv, dk, dv),
        _ => {
            return Err(format!(
                "expected 4 or 6 comma-separated integers, got {text:?}"
            ))
        }
    };
    cfg.map_err(|e| e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioRow {
    #[serde(flatten)]
    pub config: RatioConfig,
    pub ratio_percent: f64,
    pub ratio: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SnapshotStats {
    pub segments: SegmentLengths,
    pub key_stage_sizes: Vec<u32>,
    pub value_stage_sizes: Vec<u32>,
    pub memory: MemoryReport,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StatsOutcome {
    Ratios(Vec<RatioRow>),
    Snapshot(SnapshotStats),
}

pub fn ratio_rows(configs: &[RatioConfig], full_precision: bool) -> Vec<RatioRow> {
    configs
        .iter()
        .map(|&config| {
            let ratio_percent = config.ratio_percent();
            RatioRow {
                config,
                ratio_percent,
                ratio: format!("{}%", render(ratio_percent, full_precision)),
            }
        })
        .collect()
}

pub fn run(args: &StatsArgs, out: &mut dyn Write) -> Result<StatsOutcome> {
    match (&args.snapshot, args.configs.is_empty()) {
        (Some(path), true) => {
            let snapshot = CacheSnapshot::load(path)?;
            let stats = SnapshotStats {
                segments: snapshot.segments(),
                key_stage_sizes: snapshot.key_stage_sizes().to_vec(),
                value_stage_sizes: snapshot.value_stage_sizes().to_vec(),
                memory: snapshot.memory_report(),
            };
            emit(out, &stats)?;
            Ok(StatsOutcome::Snapshot(stats))
        }
        (None, false) => {
            let rows = ratio_rows(&args.configs, args.full_precision);
            for row in &rows {
                emit(out, row)?;
            }
            Ok(StatsOutcome::Ratios(rows))
        }
        _ => bail!("give either --config or --snapshot"),
    }
}
