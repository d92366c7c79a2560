#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use vqkv_core::{CacheKind, Codebook, CodebookStack, Matrix};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Random stack; projections are identity plus noise so search and
/// reconstruction really go through `W q`.
pub fn random_stack(
    rng: &mut ChaCha8Rng,
    dim: usize,
    sizes: &[usize],
    kind: CacheKind,
) -> CodebookStack {
    let stages = sizes
        .iter()
        .enumerate()
        .map(|(s, &size)| {
            let scale = 1.0 / (1 + s) as f64;
            let entries = gaussian_matrix(rng, size, dim, scale);
            let mut projection = gaussian_matrix(rng, dim, dim, 0.2);
            for i in 0..dim {
                projection.as_mut_slice()[i * dim + i] += 1.0;
            }
            Codebook::new(entries, projection).unwrap()
        })
        .collect();
    CodebookStack::new(stages, kind).unwrap()
}

pub fn random_sizes(rng: &mut ChaCha8Rng, max_stages: usize, max_size: usize) -> Vec<usize> {
    let n = rng.random_range(1..=max_stages);
    (0..n).map(|_| rng.random_range(1..=max_size)).collect()
}
