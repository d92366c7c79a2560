use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;
use vqkv_core::dataset::DatasetStream;
use vqkv_core::matrix::squared_distance;
use vqkv_core::{CodeMatrix, CodebookStack};

use super::emit;

const CHUNK_ROWS: usize = 4096;

#[derive(Debug, Clone, Args)]
pub struct CompressArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub stack: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompressReport {
    pub rows: usize,
    pub payload_bits: u64,
    /// Mean of `||x - reconstruct(codes)||^2`.
    pub mse: f64,
}

/// Encodes the dataset chunk by chunk, writes the codes, and measures the
/// reconstruction error by decoding what was written.
pub fn run(args: &CompressArgs, out: &mut dyn Write) -> Result<CompressReport> {
    let stack = CodebookStack::load(&args.stack)
        .with_context(|| format!("reading {}", args.stack.display()))?;
    let mut stream = DatasetStream::open(&args.data)
        .with_context(|| format!("reading {}", args.data.display()))?;
    let mut codes = CodeMatrix::new(&stack.stage_sizes())?;
    let mut sum = 0.0;
    while let Some(chunk) = stream.next_chunk(CHUNK_ROWS)? {
        let (chunk_codes, _) = stack.quantize_batch(&chunk)?;
        let recon = stack.reconstruct_block(&chunk_codes, 0..chunk_codes.rows())?;
        sum += chunk
            .iter_rows()
            .zip(recon.iter_rows())
            .map(|(x, y)| squared_distance(x, y))
            .sum::<f64>();
        codes.extend(&chunk_codes)?;
    }
    let mut file = BufWriter::new(
        File::create(&args.out).with_context(|| format!("writing {}", args.out.display()))?,
    );
    codes.write_to(&mut file)?;
    file.flush()?;

    let report = CompressReport {
        rows: codes.rows(),
        payload_bits: codes.payload_bits(),
        mse: sum / codes.rows().max(1) as f64,
    };
    emit(out, &report)?;
    Ok(report)
}
