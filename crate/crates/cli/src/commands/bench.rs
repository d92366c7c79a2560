//! Simulated prefill + decode run over synthetic vectors.
//!
//! Keys come from the given spec; values from a Gaussian mixture with the
//! same dimension (or `--value-dim`) and seed `seed + 1`. Queries are
//! standard-normal vectors scaled by `--query-scale`. At each checkpoint
//! the harness checks segment accounting and emits memory and fidelity
//! reports; a summary line compares the intermediate-segment ratio with the
//! ratio formula, and `--budget-bytes` adds a token-capacity comparison.

use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use vqkv_core::attention::attend_with_stats;
use vqkv_core::cache::{CompressionStats, SegmentLengths};
use vqkv_core::ratio::stages_ratio_percent;
use vqkv_core::synth::generate;
use vqkv_core::{
    fidelity, AttentionConfig, CacheState, CodebookStack, CompressionSchedule, Error,
    FidelityReport, Matrix, MemoryReport, SyntheticKind, SyntheticSpec, WindowPolicy,
};

use super::{emit, SpecArgs};

const QUERY_SALT: u64 = 0x7175_6572_7921;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScheduleArg {
    Batched,
    PerStep,
}

impl From<ScheduleArg> for CompressionSchedule {
    fn from(s: ScheduleArg) -> Self {
        match s {
            ScheduleArg::Batched => CompressionSchedule::Batched,
            ScheduleArg::PerStep => CompressionSchedule::PerStep,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    /// Value dimension; defaults to `--dim`.
    #[arg(long)]
    pub value_dim: Option<usize>,
    #[arg(long)]
    pub key_stack: PathBuf,
    #[arg(long)]
    pub value_stack: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub linit: usize,
    #[arg(long, default_value_t = 1024)]
    pub llocal: usize,
    #[arg(long, value_enum, default_value_t = ScheduleArg::Batched)]
    pub schedule: ScheduleArg,
    /// Total tokens (prompt plus decoded).
    #[arg(long)]
    pub tokens: usize,
    /// Prompt length; defaults to `min(tokens, 2048)`.
    #[arg(long)]
    pub prompt: Option<usize>,
    /// Tokens between checkpoints; defaults to a tenth of `--tokens`.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub queries: usize,
    #[arg(long, default_value_t = 1.0)]
    pub query_scale: f64,
    #[arg(long, default_value_t = 64)]
    pub block_rows: usize,
    /// Compare how many tokens fit in this many bytes, raw vs compressed.
    #[arg(long)]
    pub budget_bytes: Option<u64>,
    #[arg(long)]
    pub snapshot_out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Checkpoint {
    pub event: &'static str,
    pub tokens: usize,
    pub segments: SegmentLengths,
    pub stats: CompressionStats,
    /// `total_len` equals both the tokens fed so far and the segment sum.
    pub accounting_ok: bool,
    pub memory: MemoryReport,
    pub fidelity: FidelityReport,
    pub peak_reconstructed_scalars: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub event: &'static str,
    pub tokens: usize,
    pub peak_reconstructed_scalars: usize,
    /// `block_rows * max(Dk, Dv)`.
    pub peak_bound: usize,
    pub within_bound: bool,
    pub formula_ratio_percent: f64,
    pub effective_ratio_percent: f64,
    pub amortized_ratio_percent: f64,
    pub accounting_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetReport {
    pub event: &'static str,
    pub budget_bytes: u64,
    pub raw_tokens: u64,
    pub compressed_tokens: u64,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOutcome {
    pub checkpoints: Vec<Checkpoint>,
    pub summary: Summary,
    pub budget: Option<BudgetReport>,
}

fn load_stack(path: &PathBuf) -> Result<Arc<CodebookStack>> {
    Ok(Arc::new(
        CodebookStack::load(path).with_context(|| format!("reading {}", path.display()))?,
    ))
}

fn queries(seed: u64, count: usize, dim: usize, scale: f64) -> Result<Matrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ QUERY_SALT);
    let data = (0..count * dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        })
        .collect();
    Ok(Matrix::from_vec(count, dim, data)?)
}

/// Largest token count whose cache fits in `budget` bytes. Raw rows are
/// counted at their peak (init, local window and a full pending buffer).
pub fn capacity(
    budget: u64,
    policy: &WindowPolicy,
    key_dim: usize,
    value_dim: usize,
    bits_per_token: u64,
    overhead: u64,
) -> (u64, u64) {
    let raw_per_token = 2 * (key_dim + value_dim) as u64;
    let raw_tokens = budget / raw_per_token;
    let pending_peak = match policy.schedule {
        CompressionSchedule::Batched => policy.local_len.saturating_sub(1),
        CompressionSchedule::PerStep => 0,
    };
    let raw_cap = (policy.init_len + policy.local_len + pending_peak) as u64;
    let available = budget.saturating_sub(overhead);
    let compressed_tokens = if available >= raw_cap * raw_per_token {
        raw_cap + (available - raw_cap * raw_per_token) * 8 / bits_per_token.max(1)
    } else {
        available / raw_per_token
    };
    (raw_tokens, compressed_tokens)
}

pub fn run(args: &BenchArgs, out: &mut dyn Write) -> Result<BenchOutcome> {
    let key_stack = load_stack(&args.key_stack)?;
    let value_stack = load_stack(&args.value_stack)?;
    let key_dim = args.spec.dim;
    let value_dim = args.value_dim.unwrap_or(key_dim);
    if key_stack.dim() != key_dim || value_stack.dim() != value_dim {
        return Err(Error::InvalidInput(format!(
            "stacks have dimensions {}/{}, data has {key_dim}/{value_dim}",
            key_stack.dim(),
            value_stack.dim()
        ))
        .into());
    }
    if args.tokens == 0 {
        return Err(Error::InvalidInput("--tokens must be at least 1".into()).into());
    }
    let prompt = args.prompt.unwrap_or(2048).min(args.tokens);
    let every = args
        .checkpoint_every
        .unwrap_or(args.tokens.div_ceil(10))
        .max(1);

    let keys = generate(&args.spec.to_spec(args.tokens))?;
    let values = generate(&SyntheticSpec {
        kind: SyntheticKind::GaussianMixture,
        dim: value_dim,
        seed: args.spec.seed.wrapping_add(1),
        ..args.spec.to_spec(args.tokens)
    })?;
    let queries = queries(args.spec.seed, args.queries, key_dim, args.query_scale)?;
    let attention = AttentionConfig::with_block_rows(args.block_rows);

    let policy = WindowPolicy {
        init_len: args.linit,
        local_len: args.llocal,
        schedule: args.schedule.into(),
    };
    let mut state = CacheState::new(policy, key_stack.clone(), value_stack.clone())?;
    let mut checkpoints = Vec::new();
    let mut peak = 0;

    let mut checkpoint = |state: &CacheState, t: usize, out: &mut dyn Write| -> Result<()> {
        let segments = state.segments();
        let fidelity = if queries.is_empty() {
            None
        } else {
            Some(fidelity(
                state,
                &keys.slice_rows(0..t),
                &values.slice_rows(0..t),
                &queries,
                &attention,
            )?)
        };
        let probe = vec![0.0; key_dim];
        let (_, stats) = attend_with_stats(
            state,
            queries.iter_rows().next().unwrap_or(&probe),
            &attention,
        )?;
        peak = peak.max(stats.peak_reconstructed_scalars);
        let record = Checkpoint {
            event: "checkpoint",
            tokens: t,
            segments,
            stats: state.stats(),
            accounting_ok: state.total_len() == t && segments.total() == t,
            memory: state.memory_report(),
            fidelity: fidelity.unwrap_or(FidelityReport {
                queries: 0,
                output_max_abs_err: 0.0,
                output_cosine: 1.0,
                key_mse: 0.0,
                value_mse: 0.0,
            }),
            peak_reconstructed_scalars: stats.peak_reconstructed_scalars,
        };
        emit(out, &record)?;
        checkpoints.push(record);
        Ok(())
    };

    if prompt > 0 {
        state.prefill(&keys.slice_rows(0..prompt), &values.slice_rows(0..prompt))?;
        checkpoint(&state, prompt, out)?;
    }
    for t in prompt..args.tokens {
        state.append_token(keys.row(t), values.row(t))?;
        let fed = t + 1;
        if fed % every == 0 || fed == args.tokens {
            checkpoint(&state, fed, out)?;
        }
    }

    let memory = state.memory_report();
    let peak_bound = args.block_rows * key_dim.max(value_dim);
    let summary = Summary {
        event: "summary",
        tokens: state.total_len(),
        peak_reconstructed_scalars: peak,
        peak_bound,
        within_bound: peak <= peak_bound,
        formula_ratio_percent: stages_ratio_percent(
            &key_stack.stage_sizes(),
            &value_stack.stage_sizes(),
            key_dim,
            value_dim,
        ),
        effective_ratio_percent: memory.effective_ratio * 100.0,
        amortized_ratio_percent: memory.amortized_ratio * 100.0,
        accounting_ok: checkpoints.iter().all(|c| c.accounting_ok),
    };
    emit(out, &summary)?;

    let budget = args.budget_bytes.map(|budget_bytes| {
        let bits = key_stack
            .stage_sizes()
            .iter()
            .chain(&value_stack.stage_sizes())
            .map(|&s| vqkv_core::codes::index_bits(s) as u64)
            .sum();
        let overhead = key_stack.serialized_len() + value_stack.serialized_len();
        let (raw_tokens, compressed_tokens) =
            capacity(budget_bytes, &policy, key_dim, value_dim, bits, overhead);
        BudgetReport {
            event: "budget",
            budget_bytes,
            raw_tokens,
            compressed_tokens,
            gain: compressed_tokens as f64 / raw_tokens.max(1) as f64,
        }
    });
    if let Some(b) = &budget {
        emit(out, b)?;
    }

    if let Some(path) = &args.snapshot_out {
        state
            .save_snapshot(path)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(BenchOutcome {
        checkpoints,
        summary,
        budget,
    })
}
