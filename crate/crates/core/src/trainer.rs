//! Codebook training.
//!
//! Mini-batch SGD on the VQ objective
//!
//! ```text
//! L = ||x - x_hat||^2 + beta * sum_s ||e_s - sg(r_s)||^2 + gamma * sum_s ||r_s - sg(e_s)||
//! ```
//!
//! where `r_s` is the residual entering stage `s` and `e_s` the effective
//! entry it selected. Selection is treated as a constant (straight-through),
//! and so are the incoming residuals. Following SimVQ, raw entries stay at
//! their random initialization and only the projections are learned unless
//! `train_entries` is set.
//!
//! With no encoder in front of the quantizer, the commitment term has no
//! trainable input: it is reported but contributes no gradient.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::codebook::{CacheKind, Codebook, CodebookStack};
use crate::dataset::VectorDataset;
use crate::error::{check_dim, invalid_input, Error, Result};
use crate::matrix::{squared_norm, Matrix};

/// Batch size used when a run keeps the default and the dataset is too
/// small to fill it ten times over.
pub const SMALL_DATASET_BATCH: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight of the codebook-pull term.
    pub beta: f64,
    /// Weight of the commitment term.
    pub gamma: f64,
    pub seed: u64,
    /// Standard deviation of the Gaussian entry initialization.
    pub init_scale: f64,
    /// Square the commitment norm instead of using it as printed.
    pub square_commitment: bool,
    /// Also learn the raw entries (ablation; SimVQ keeps them frozen).
    pub train_entries: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 65536,
            epochs: 10,
            beta: 0.25,
            gamma: 1.0,
            seed: 0,
            init_scale: 1.0,
            square_commitment: false,
            train_entries: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid_input("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(invalid_input("batch size must be at least 1"));
        }
        if !(self.beta >= 0.0 && self.gamma >= 0.0) {
            return Err(invalid_input("beta and gamma must be non-negative"));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(invalid_input("init scale must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            beta: self.beta,
            gamma: self.gamma,
            square_commitment: self.square_commitment,
        }
    }

    /// Batch size actually used for a training split of `rows` vectors.
    pub fn effective_batch_size(&self, rows: usize) -> usize {
        let default = TrainConfig::default().batch_size;
        let b = if self.batch_size == default && rows < 10 * self.batch_size {
            SMALL_DATASET_BATCH
        } else {
            self.batch_size
        };
        b.min(rows).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub beta: f64,
    pub gamma: f64,
    pub square_commitment: bool,
}

/// Batch means of the three loss terms, weights already applied.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossTerms {
    pub recon: f64,
    pub codebook_pull: f64,
    pub commitment: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.recon + self.codebook_pull + self.commitment
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub per_epoch_loss: Vec<f64>,
    /// Held-out mean squared residual norm after each stage.
    pub per_stage_mse: Vec<f64>,
    pub final_mse: f64,
    pub holdout_rows: usize,
    pub batch_size: usize,
}

/// Random stack: Gaussian entries (std `init_scale`, rounded to f32) and
/// identity projections. Deterministic in `config.seed`.
pub fn init_stack(
    dim: usize,
    stage_sizes: &[usize],
    kind: CacheKind,
    config: &TrainConfig,
) -> Result<CodebookStack> {
    config.validate()?;
    if dim == 0 {
        return Err(invalid_input("dimension must be at least 1"));
    }
    if stage_sizes.is_empty() {
        return Err(invalid_input("at least one stage is required"));
    }
    if let Some(&s) = stage_sizes.iter().find(|&&s| s < 2) {
        return Err(invalid_input(format!("codebook size {s} is below 2")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let stages = stage_sizes
        .iter()
        .map(|&s| {
            let data = (0..s * dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (config.init_scale * z) as f32 as f64
                })
                .collect();
            Codebook::new(Matrix::from_vec(s, dim, data)?, Matrix::identity(dim))
        })
        .collect::<Result<Vec<_>>>()?;
    CodebookStack::new(stages, kind)
}

/// Greedy pass over one vector, recording the residual after each stage.
fn forward(stack: &CodebookStack, x: &[f64], picks: &mut [usize], post: &mut [f64]) {
    let d = x.len();
    let mut residual = x.to_vec();
    for (s, stage) in stack.stages().iter().enumerate() {
        let (i, _) = stage.nearest_sq(&residual);
        for (r, e) in residual.iter_mut().zip(stage.effective_entry(i)) {
            *r -= e;
        }
        picks[s] = i;
        post[s * d..(s + 1) * d].copy_from_slice(&residual);
    }
}

fn sample_terms(post: &[f64], d: usize, weights: &LossWeights) -> LossTerms {
    let n = post.len() / d;
    let mut terms = LossTerms {
        recon: squared_norm(&post[(n - 1) * d..]),
        ..Default::default()
    };
    for stage_post in post.chunks_exact(d) {
        let sq = squared_norm(stage_post);
        terms.codebook_pull += weights.beta * sq;
        terms.commitment += weights.gamma
            * if weights.square_commitment {
                sq
            } else {
                sq.sqrt()
            };
    }
    terms
}

/// Mean loss over `batch`; the stop-gradient has no effect on the value.
pub fn loss(
    stack: &CodebookStack,
    batch: &Matrix,
    weights: &LossWeights,
) -> Result<(f64, LossTerms)> {
    check_dim(stack.dim(), batch.cols(), "loss")?;
    if batch.is_empty() {
        return Err(invalid_input("loss over an empty batch"));
    }
    let (n, d) = (stack.num_stages(), stack.dim());
    let mut picks = vec![0; n];
    let mut post = vec![0.0; n * d];
    let mut sum = LossTerms::default();
    for x in batch.iter_rows() {
        forward(stack, x, &mut picks, &mut post);
        let t = sample_terms(&post, d, weights);
        sum.recon += t.recon;
        sum.codebook_pull += t.codebook_pull;
        sum.commitment += t.commitment;
    }
    let m = batch.rows() as f64;
    let mean = LossTerms {
        recon: sum.recon / m,
        codebook_pull: sum.codebook_pull / m,
        commitment: sum.commitment / m,
    };
    Ok((mean.total(), mean))
}

/// Mean squared residual norm after each stage: entry `i` is the mean of
/// `||x - sum_{j<=i} e_j||^2`.
pub fn per_stage_mse(stack: &CodebookStack, data: &Matrix) -> Result<Vec<f64>> {
    check_dim(stack.dim(), data.cols(), "per_stage_mse")?;
    if data.is_empty() {
        return Err(invalid_input("per-stage MSE over no vectors"));
    }
    let (n, d) = (stack.num_stages(), stack.dim());
    let mut picks = vec![0; n];
    let mut post = vec![0.0; n * d];
    let mut sums = vec![0.0; n];
    for x in data.iter_rows() {
        forward(stack, x, &mut picks, &mut post);
        for (s, chunk) in post.chunks_exact(d).enumerate() {
            sums[s] += squared_norm(chunk);
        }
    }
    Ok(sums.into_iter().map(|v| v / data.rows() as f64).collect())
}

/// Every hundredth vector (index `i % 100 == 99`) is held out. Datasets too
/// small to hold anything out are evaluated on all rows.
fn split(count: usize) -> (Vec<usize>, Vec<usize>) {
    let (held, train): (Vec<usize>, Vec<usize>) = (0..count).partition(|i| i % 100 == 99);
    if held.is_empty() {
        let all: Vec<usize> = (0..count).collect();
        (all.clone(), all)
    } else {
        (train, held)
    }
}

struct Params {
    entries: Vec<Matrix>,
    projections: Vec<Matrix>,
}

impl Params {
    fn from_stack(stack: CodebookStack) -> Self {
        let (entries, projections) = stack
            .into_stages()
            .into_iter()
            .map(Codebook::into_parts)
            .unzip();
        Self {
            entries,
            projections,
        }
    }

    fn build(&self, kind: CacheKind, block_entries: usize) -> Result<CodebookStack> {
        let stages = self
            .entries
            .iter()
            .zip(&self.projections)
            .map(|(e, w)| Codebook::new(e.clone(), w.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(CodebookStack::new(stages, kind)?.with_block_entries(block_entries))
    }
}

/// Trains a stack of `stage_sizes` codebooks on `dataset`.
pub fn train(
    dataset: &VectorDataset,
    stage_sizes: &[usize],
    kind: CacheKind,
    config: &TrainConfig,
) -> Result<(CodebookStack, TrainReport)> {
    config.validate()?;
    let data = dataset.vectors();
    if data.is_empty() {
        return Err(invalid_input("dataset is empty"));
    }
    let d = dataset.dim();
    let initial = init_stack(d, stage_sizes, kind, config)?;
    let block_entries = initial.block_entries();
    let n = initial.num_stages();

    let (train_rows, held_rows) = split(dataset.count());
    let batch_size = config.effective_batch_size(train_rows.len());
    let weights = config.loss_weights();

    let mut params = Params::from_stack(initial.clone());
    let mut stack = initial;
    let mut order = train_rows;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);

    let mut per_epoch_loss = Vec::with_capacity(config.epochs);
    let mut picks = vec![0usize; n];
    let mut post = vec![0.0; n * d];
    // per stage: summed gradient w.r.t. each effective entry, and hit counts
    let mut entry_grads: Vec<Matrix> = stack
        .stages()
        .iter()
        .map(|s| Matrix::zeros(s.size(), d))
        .collect();
    let mut hits: Vec<Vec<u32>> = stack.stages().iter().map(|s| vec![0; s.size()]).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(batch_size) {
            for (g, h) in entry_grads.iter_mut().zip(hits.iter_mut()) {
                g.as_mut_slice().fill(0.0);
                h.fill(0);
            }
            for &row in batch {
                forward(&stack, data.row(row), &mut picks, &mut post);
                let final_residual = &post[(n - 1) * d..];
                epoch_loss += sample_terms(&post, d, &weights).total();
                for s in 0..n {
                    // d/de_s of the reconstruction and pull terms
                    let stage_post = &post[s * d..(s + 1) * d];
                    let g = entry_grads[s].row_mut(picks[s]);
                    for k in 0..d {
                        g[k] += -2.0 * final_residual[k] - 2.0 * weights.beta * stage_post[k];
                    }
                    hits[s][picks[s]] += 1;
                }
            }
            let step = config.learning_rate / batch.len() as f64;
            for s in 0..n {
                apply_gradient(
                    &mut params,
                    s,
                    &entry_grads[s],
                    &hits[s],
                    step,
                    config.train_entries,
                );
            }
            stack = match params.build(kind, block_entries) {
                Ok(s) => s,
                Err(_) => {
                    return Err(Error::Diverged {
                        epoch,
                        loss: f64::NAN,
                    })
                }
            };
        }
        let mean = epoch_loss / order.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged { epoch, loss: mean });
        }
        per_epoch_loss.push(mean);
    }

    let stack = stack.rounded_to_f32()?;
    let per_stage_mse = per_stage_mse(&stack, &data.select_rows(&held_rows))?;
    let final_mse = *per_stage_mse.last().expect("at least one stage");
    Ok((
        stack,
        TrainReport {
            per_epoch_loss,
            per_stage_mse,
            final_mse,
            holdout_rows: held_rows.len(),
            batch_size,
        },
    ))
}

/// SGD update for stage `s` given the summed gradient w.r.t. each effective
/// entry `e_i = W q_i`: `dW = sum_i g_i q_i^T`, `dq_i = W^T g_i`.
fn apply_gradient(
    params: &mut Params,
    s: usize,
    grads: &Matrix,
    hits: &[u32],
    step: f64,
    train_entries: bool,
) {
    let d = grads.cols();
    let entries = &mut params.entries[s];
    let w = &mut params.projections[s];
    let mut entry_step = Matrix::zeros(0, d);
    if train_entries {
        entry_step = Matrix::zeros(entries.rows(), d);
        for (i, _) in hits.iter().enumerate().filter(|(_, &h)| h > 0) {
            let g = grads.row(i);
            let out = entry_step.row_mut(i);
            for (r, &gr) in g.iter().enumerate() {
                for (o, wrc) in out.iter_mut().zip(w.row(r)) {
                    *o += wrc * gr;
                }
            }
        }
    }
    for (i, _) in hits.iter().enumerate().filter(|(_, &h)| h > 0) {
        let g = grads.row(i);
        let q = entries.row(i).to_vec();
        for (r, &gr) in g.iter().enumerate() {
            let gr = step * gr;
            for (wrc, qc) in w.row_mut(r).iter_mut().zip(&q) {
                *wrc -= gr * qc;
            }
        }
    }
    if train_entries {
        for (e, g) in entries.as_mut_slice().iter_mut().zip(entry_step.as_slice()) {
            *e -= step * g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_f32_exact() {
        let cfg = TrainConfig {
            seed: 7,
            ..Default::default()
        };
        let a = init_stack(8, &[4, 4], CacheKind::Key, &cfg).unwrap();
        let b = init_stack(8, &[4, 4], CacheKind::Key, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rounded_to_f32().unwrap(), a);
        for stage in a.stages() {
            assert_eq!(stage.projection(), &Matrix::identity(8));
        }
    }

    #[test]
    fn zero_scale_gives_zero_entries() {
        let cfg = TrainConfig {
            init_scale: 0.0,
            ..Default::default()
        };
        let s = init_stack(3, &[2, 5], CacheKind::Value, &cfg).unwrap();
        for stage in s.stages() {
            assert!(stage.entries().as_slice().iter().all(|&v| v == 0.0));
            assert_eq!(stage.projection(), &Matrix::identity(3));
        }
    }

    #[test]
    fn init_validates_parameters() {
        let cfg = TrainConfig::default();
        assert!(init_stack(4, &[], CacheKind::Key, &cfg).is_err());
        assert!(init_stack(4, &[1], CacheKind::Key, &cfg).is_err());
        assert!(init_stack(0, &[2], CacheKind::Key, &cfg).is_err());
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(init_stack(4, &[2], CacheKind::Key, &bad).is_err());
    }

    #[test]
    fn holdout_is_one_percent_or_everything() {
        let (train, held) = split(1000);
        assert_eq!(held.len(), 10);
        assert_eq!(train.len(), 990);
        let (train, held) = split(50);
        assert_eq!(train.len(), 50);
        assert_eq!(held.len(), 50);
    }

    #[test]
    fn default_batch_shrinks_for_small_datasets() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.effective_batch_size(100_000), 1024);
        assert_eq!(cfg.effective_batch_size(700_000), 65536);
        assert_eq!(cfg.effective_batch_size(10), 10);
        let explicit = TrainConfig {
            batch_size: 4096,
            ..Default::default()
        };
        assert_eq!(explicit.effective_batch_size(20_000), 4096);
    }

    #[test]
    fn empty_loss_batch_is_rejected() {
        let s = init_stack(2, &[2], CacheKind::Key, &TrainConfig::default()).unwrap();
        assert!(loss(
            &s,
            &Matrix::empty(2),
            &TrainConfig::default().loss_weights()
        )
        .is_err());
        assert!(loss(
            &s,
            &Matrix::zeros(1, 3),
            &TrainConfig::default().loss_weights()
        )
        .is_err());
    }
}
