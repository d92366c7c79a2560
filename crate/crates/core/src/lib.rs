//! Vector-quantized KV-cache compression.
//!
//! - [`codebook`]: residual SimVQ stacks (search, encode, reconstruct).
//! - [`codes`]: bit-packed integer code storage.
//! - [`trainer`]: SGD training of codebook stacks.
//! - [`cache`]: the segmented runtime cache with deferred batched compression.
//! - [`attention`]: blockwise reference attention and fidelity metrics.
//! - [`ratio`]: compression-ratio arithmetic.
//! - [`synth`], [`dataset`]: synthetic data and the `VECD` file format.

pub mod attention;
pub mod cache;
pub mod codebook;
pub mod codes;
pub mod dataset;
pub mod error;
pub mod matrix;
pub mod ratio;
pub mod synth;
pub mod trainer;
mod wire;

pub use attention::{attend, fidelity, AttentionConfig, FidelityReport};
pub use cache::{CacheSnapshot, CacheState, CompressionSchedule, MemoryReport, WindowPolicy};
pub use codebook::{CacheKind, Codebook, CodebookStack};
pub use codes::{CodeMatrix, CodeVector};
pub use dataset::VectorDataset;
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use ratio::RatioConfig;
pub use synth::{SyntheticKind, SyntheticSpec};
pub use trainer::{TrainConfig, TrainReport};
