//! Synthetic cache-like vectors.
//!
//! `GaussianMixture` draws from `components` isotropic Gaussians whose means
//! are standard-normal vectors; `RopeRotatedKeys` draws the same way and then
//! rotates row `i` as a key at position `i` (half-split rotary layout,
//! frequencies `base^(-2j/D)`).
//!
//! Means depend only on `seed`; `stream` selects an independent sample
//! stream around the same means.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{invalid_input, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    GaussianMixture,
    RopeRotatedKeys,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub dim: usize,
    pub count: usize,
    pub components: usize,
    pub seed: u64,
    pub rope_base: f64,
    /// Standard deviation around each component mean.
    pub cluster_std: f64,
    pub stream: u64,
}

impl SyntheticSpec {
    pub fn gaussian_mixture(dim: usize, count: usize, components: usize, seed: u64) -> Self {
        Self {
            kind: SyntheticKind::GaussianMixture,
            dim,
            count,
            components,
            seed,
            rope_base: 10_000.0,
            cluster_std: 0.3,
            stream: 0,
        }
    }

    pub fn rope_rotated_keys(dim: usize, count: usize, components: usize, seed: u64) -> Self {
        Self {
            kind: SyntheticKind::RopeRotatedKeys,
            ..Self::gaussian_mixture(dim, count, components, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.count == 0 || self.components == 0 {
            return Err(invalid_input("dim, count and components must be positive"));
        }
        if self.kind == SyntheticKind::RopeRotatedKeys && !self.dim.is_multiple_of(2) {
            return Err(invalid_input("rotary keys need an even dimension"));
        }
        if !(self.rope_base > 0.0 && self.rope_base.is_finite()) {
            return Err(invalid_input("rope base must be positive"));
        }
        if !(self.cluster_std >= 0.0 && self.cluster_std.is_finite()) {
            return Err(invalid_input("cluster std must be non-negative"));
        }
        Ok(())
    }

    pub fn component_means(&self) -> Matrix {
        let mut rng = self.rng();
        let data = (0..self.components * self.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Matrix::from_vec(self.components, self.dim, data).expect("shape matches")
    }

    /// Salted, so data never replays other generators seeded the same way.
    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ SEED_SALT)
    }
}

const SEED_SALT: u64 = 0x7679_6b76_5f67_656e;

/// Generates `spec.count` rows.
pub fn generate(spec: &SyntheticSpec) -> Result<Matrix> {
    generate_with_unrotated(spec).map(|(rows, _)| rows)
}

/// Like [`generate`], also returning the rows before any rotation.
pub fn generate_with_unrotated(spec: &SyntheticSpec) -> Result<(Matrix, Matrix)> {
    spec.validate()?;
    let means = spec.component_means();
    let mut rng = spec.rng();
    rng.set_stream(spec.stream.wrapping_add(1));

    let mut base = Matrix::zeros(spec.count, spec.dim);
    for r in 0..spec.count {
        let c = rng.random_range(0..spec.components);
        for (x, m) in base.row_mut(r).iter_mut().zip(means.row(c)) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x = m + spec.cluster_std * z;
        }
    }
    let rotated = match spec.kind {
        SyntheticKind::GaussianMixture => base.clone(),
        SyntheticKind::RopeRotatedKeys => {
            let mut out = base.clone();
            for r in 0..spec.count {
                apply_rope(out.row_mut(r), r, spec.rope_base);
            }
            out
        }
    };
    Ok((rotated, base))
}

/// Rotates `x` in place as a vector at `position`. Dimension `j` pairs with
/// `j + D/2` and turns by `position * base^(-2j/D)`.
pub fn apply_rope(x: &mut [f64], position: usize, base: f64) {
    let half = x.len() / 2;
    let d = x.len() as f64;
    for j in 0..half {
        let theta = position as f64 * base.powf(-2.0 * j as f64 / d);
        let (sin, cos) = theta.sin_cos();
        let (a, b) = (x[j], x[j + half]);
        x[j] = a * cos - b * sin;
        x[j + half] = a * sin + b * cos;
    }
}
