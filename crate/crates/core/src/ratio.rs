//! Compression ratio of a key/value codebook configuration:
//!
//! ```text
//! r = (1 - (N_k log2 S_k + N_v log2 S_v) / (16 (D_k + D_v))) * 100%
//! ```

use serde::Serialize;

use crate::error::{invalid_input, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RatioConfig {
    pub key_stages: u64,
    pub key_size: u64,
    pub value_stages: u64,
    pub value_size: u64,
    pub key_dim: u64,
    pub value_dim: u64,
}

impl RatioConfig {
    pub const DEFAULT_DIM: u64 = 128;

    /// Configuration with the default head dimension (128) for both kinds.
    pub fn new(key_stages: u64, key_size: u64, value_stages: u64, value_size: u64) -> Result<Self> {
        Self::with_dims(
            key_stages,
            key_size,
            value_stages,
            value_size,
            Self::DEFAULT_DIM,
            Self::DEFAULT_DIM,
        )
    }

    pub fn with_dims(
        key_stages: u64,
        key_size: u64,
        value_stages: u64,
        value_size: u64,
        key_dim: u64,
        value_dim: u64,
    ) -> Result<Self> {
        let cfg = Self {
            key_stages,
            key_size,
            value_stages,
            value_size,
            key_dim,
            value_dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.key_stages == 0 || self.value_stages == 0 {
            return Err(invalid_input("codebook counts must be positive"));
        }
        if self.key_size < 2 || self.value_size < 2 {
            return Err(invalid_input("codebook sizes must be at least 2"));
        }
        if self.key_dim == 0 || self.value_dim == 0 {
            return Err(invalid_input("dimensions must be positive"));
        }
        Ok(())
    }

    /// Bits per token after compression (both kinds).
    pub fn compressed_bits(&self) -> f64 {
        self.key_stages as f64 * (self.key_size as f64).log2()
            + self.value_stages as f64 * (self.value_size as f64).log2()
    }

    /// Bits per token at 16 bits per scalar.
    pub fn raw_bits(&self) -> f64 {
        16.0 * (self.key_dim + self.value_dim) as f64
    }

    /// Discarded fraction of the raw cache, in percent.
    pub fn ratio_percent(&self) -> f64 {
        (1.0 - self.compressed_bits() / self.raw_bits()) * 100.0
    }
}

/// The same ratio for stacks whose stages may differ in size: each stage
/// contributes `log2 S` bits per token.
pub fn stages_ratio_percent(
    key_sizes: &[u32],
    value_sizes: &[u32],
    key_dim: usize,
    value_dim: usize,
) -> f64 {
    let bits: f64 = key_sizes
        .iter()
        .chain(value_sizes)
        .map(|&s| (s as f64).log2())
        .sum();
    (1.0 - bits / (16.0 * (key_dim + value_dim) as f64)) * 100.0
}

/// Formats with `decimals` places, rounding halves away from zero.
pub fn format_percent(value: f64, decimals: u32) -> String {
    let scale = 10f64.powi(decimals as i32);
    let rounded = (value * scale).round() / scale;
    format!("{rounded:.*}", decimals as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn headline_configs() {
        let r = RatioConfig::new(56, 1024, 16, 512).unwrap().ratio_percent();
        assert_eq!(format_percent(r, 1), "82.8");
        let r = RatioConfig::new(56, 1024, 10, 65536)
            .unwrap()
            .ratio_percent();
        assert_eq!(format_percent(r, 1), "82.4");
        let r = RatioConfig::new(56, 1024, 8, 512).unwrap().ratio_percent();
        assert_eq!(format_percent(r, 1), "84.6");
    }

    #[test]
    fn minimal_codebooks() {
        let r = RatioConfig::new(1, 2, 1, 2).unwrap().ratio_percent();
        assert!((r - 100.0 * (1.0 - 2.0 / 4096.0)).abs() < 1e-12);
    }

    #[test]
    fn halves_round_up() {
        // 56*10 + 16*13 bits out of 4096
        let r = RatioConfig::new(56, 1024, 16, 8192)
            .unwrap()
            .ratio_percent();
        assert_eq!(r, 81.25);
        assert_eq!(format_percent(r, 1), "81.3");
    }

    #[test]
    fn uniform_stages_match_config() {
        let cfg = RatioConfig::new(56, 1024, 16, 512).unwrap();
        let r = stages_ratio_percent(&[1024; 56], &[512; 16], 128, 128);
        assert_eq!(r, cfg.ratio_percent());
    }

    #[test]
    fn rejects_degenerate_configs() {
        assert!(RatioConfig::new(0, 2, 0, 2).is_err());
        assert!(RatioConfig::new(1, 1, 1, 2).is_err());
        assert!(RatioConfig::with_dims(1, 2, 1, 2, 0, 128).is_err());
    }
}
