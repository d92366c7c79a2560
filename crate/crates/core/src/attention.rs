//! Reference single-query attention over a [`CacheState`].
//!
//! The cache is walked in blocks of `block_rows` rows. Each block is
//! materialized with `view_block` (so at most `block_rows` intermediate rows
//! are reconstructed at a time) and folded into a running softmax: running
//! max, running normalizer and running weighted value sum. The result equals
//! monolithic `softmax(scale * q K^T) V` up to rounding.
//!
//! The cache only ever holds past tokens, so causal masking is implied.

use serde::Serialize;

use crate::cache::CacheState;
use crate::error::{check_dim, invalid_input, Error, Result};
use crate::matrix::{dot, norm, squared_distance, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AttentionConfig {
    pub block_rows: usize,
    /// Logit scale; `None` means `1 / sqrt(D)`.
    pub scale: Option<f64>,
    pub causal: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            block_rows: 64,
            scale: None,
            causal: true,
        }
    }
}

impl AttentionConfig {
    pub fn with_block_rows(block_rows: usize) -> Self {
        Self {
            block_rows,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.block_rows == 0 {
            return Err(invalid_input("block_rows must be at least 1"));
        }
        Ok(())
    }

    fn scale_for(&self, dim: usize) -> f64 {
        self.scale.unwrap_or(1.0 / (dim as f64).sqrt())
    }
}

/// Working-set counters from one `attend` call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct AttendStats {
    pub blocks: usize,
    /// Largest number of scalars reconstructed from codes for one cache kind
    /// within a single block.
    pub peak_reconstructed_scalars: usize,
}

struct OnlineSoftmax {
    max: f64,
    denom: f64,
    acc: Vec<f64>,
    logits: Vec<f64>,
}

impl OnlineSoftmax {
    fn new(value_dim: usize) -> Self {
        Self {
            max: f64::NEG_INFINITY,
            denom: 0.0,
            acc: vec![0.0; value_dim],
            logits: Vec::new(),
        }
    }

    fn update(&mut self, query: &[f64], scale: f64, keys: &Matrix, values: &Matrix) {
        if keys.is_empty() {
            return;
        }
        self.logits.clear();
        self.logits
            .extend(keys.iter_rows().map(|k| scale * dot(query, k)));
        let block_max = self
            .logits
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let new_max = self.max.max(block_max);
        let correction = (self.max - new_max).exp();
        self.denom *= correction;
        for a in &mut self.acc {
            *a *= correction;
        }
        for (&logit, v) in self.logits.iter().zip(values.iter_rows()) {
            let p = (logit - new_max).exp();
            self.denom += p;
            for (a, x) in self.acc.iter_mut().zip(v) {
                *a += p * x;
            }
        }
        self.max = new_max;
    }

    fn finish(mut self) -> Vec<f64> {
        for a in &mut self.acc {
            *a /= self.denom;
        }
        self.acc
    }
}

pub fn attend(state: &CacheState, query: &[f64], config: &AttentionConfig) -> Result<Vec<f64>> {
    attend_with_stats(state, query, config).map(|(out, _)| out)
}

pub fn attend_with_stats(
    state: &CacheState,
    query: &[f64],
    config: &AttentionConfig,
) -> Result<(Vec<f64>, AttendStats)> {
    config.validate()?;
    check_dim(state.key_dim(), query.len(), "attention query")?;
    if state.is_empty() {
        return Err(Error::InvalidState("attention over an empty cache".into()));
    }
    let scale = config.scale_for(state.key_dim());
    let widest = state.key_dim().max(state.value_dim());
    let mut softmax = OnlineSoftmax::new(state.value_dim());
    let mut stats = AttendStats::default();
    let mut start = 0;
    while start < state.total_len() {
        let end = (start + config.block_rows).min(state.total_len());
        let block = state.view_block(start..end)?;
        let lossy = block.exact.iter().filter(|e| !**e).count();
        stats.blocks += 1;
        stats.peak_reconstructed_scalars = stats.peak_reconstructed_scalars.max(lossy * widest);
        softmax.update(query, scale, &block.keys, &block.values);
        start = end;
    }
    Ok((softmax.finish(), stats))
}

/// Blockwise attention over uncompressed key/value matrices.
pub fn attend_dense(
    keys: &Matrix,
    values: &Matrix,
    query: &[f64],
    config: &AttentionConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    check_dim(keys.cols(), query.len(), "attention query")?;
    if keys.rows() != values.rows() {
        return Err(invalid_input("key and value row counts differ"));
    }
    if keys.is_empty() {
        return Err(Error::InvalidState("attention over no rows".into()));
    }
    let scale = config.scale_for(keys.cols());
    let mut softmax = OnlineSoftmax::new(values.cols());
    let mut start = 0;
    while start < keys.rows() {
        let end = (start + config.block_rows).min(keys.rows());
        softmax.update(
            query,
            scale,
            &keys.slice_rows(start..end),
            &values.slice_rows(start..end),
        );
        start = end;
    }
    Ok(softmax.finish())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FidelityReport {
    pub queries: usize,
    pub output_max_abs_err: f64,
    /// Mean cosine similarity between compressed and raw attention outputs.
    pub output_cosine: f64,
    /// Mean squared reconstruction error per intermediate key row.
    pub key_mse: f64,
    pub value_mse: f64,
}

/// Cosine similarity; two zero vectors count as identical.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 && nb == 0.0 {
        return 1.0;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Compares attention over `state` with attention over the raw vectors that
/// produced it.
pub fn fidelity(
    state: &CacheState,
    keys: &Matrix,
    values: &Matrix,
    queries: &Matrix,
    config: &AttentionConfig,
) -> Result<FidelityReport> {
    if keys.rows() != state.total_len() || values.rows() != state.total_len() {
        return Err(invalid_input(format!(
            "originals have {}/{} rows, cache holds {}",
            keys.rows(),
            values.rows(),
            state.total_len()
        )));
    }
    check_dim(state.key_dim(), keys.cols(), "original keys")?;
    check_dim(state.value_dim(), values.cols(), "original values")?;
    if queries.is_empty() {
        return Err(invalid_input("fidelity needs at least one query"));
    }

    let mut max_err: f64 = 0.0;
    let mut cos_sum = 0.0;
    for q in queries.iter_rows() {
        let compressed = attend(state, q, config)?;
        let raw = attend_dense(keys, values, q, config)?;
        for (a, b) in compressed.iter().zip(&raw) {
            max_err = max_err.max((a - b).abs());
        }
        cos_sum += cosine(&compressed, &raw);
    }

    let seg = state.segments();
    let (mut key_mse, mut value_mse) = (0.0, 0.0);
    if seg.intermediate > 0 {
        let range = seg.init..seg.init + seg.intermediate;
        let view = state.view_block(range.clone())?;
        for (k, r) in range.enumerate() {
            key_mse += squared_distance(view.keys.row(k), keys.row(r));
            value_mse += squared_distance(view.values.row(k), values.row(r));
        }
        key_mse /= seg.intermediate as f64;
        value_mse /= seg.intermediate as f64;
    }

    Ok(FidelityReport {
        queries: queries.rows(),
        output_max_abs_err: max_err,
        output_cosine: cos_sum / queries.rows() as f64,
        key_mse,
        value_mse,
    })
}
