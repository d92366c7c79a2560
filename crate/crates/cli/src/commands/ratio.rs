use std::io::Write;

use anyhow::Result;
use clap::Args;
use vqkv_core::ratio::{format_percent, RatioConfig};

#[derive(Debug, Clone, Args)]
pub struct RatioArgs {
    #[arg(long)]
    pub nk: u64,
    #[arg(long)]
    pub sk: u64,
    #[arg(long)]
    pub nv: u64,
    #[arg(long)]
    pub sv: u64,
    #[arg(long, default_value_t = RatioConfig::DEFAULT_DIM)]
    pub dk: u64,
    #[arg(long, default_value_t = RatioConfig::DEFAULT_DIM)]
    pub dv: u64,
    /// Print every digit instead of one decimal place.
    #[arg(long)]
    pub full_precision: bool,
}

impl RatioArgs {
    pub fn config(&self) -> Result<RatioConfig> {
        Ok(RatioConfig::with_dims(
            self.nk, self.sk, self.nv, self.sv, self.dk, self.dv,
        )?)
    }
}

/// Prints the ratio as `82.8%` and returns the unrounded percentage.
pub fn run(args: &RatioArgs, out: &mut dyn Write) -> Result<f64> {
    let percent = args.config()?.ratio_percent();
    writeln!(out, "{}%", render(percent, args.full_precision))?;
    Ok(percent)
}

pub fn render(percent: f64, full_precision: bool) -> String {
    if full_precision {
        percent.to_string()
    } else {
        format_percent(percent, 1)
    }
}
