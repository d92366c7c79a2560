//! Segmented KV cache.
//!
//! Token order is `init | intermediate | pending | local`:
//!
//! - `init`: the first `init_len` tokens, kept raw forever.
//! - `intermediate`: quantized codes, append-only.
//! - `pending`: tokens evicted from the local window but not yet quantized.
//!   They are served raw until the next batched compression.
//! - `local`: the most recent `local_len` tokens, raw.
//!
//! With [`CompressionSchedule::Batched`] the pending buffer is quantized in
//! one `quantize_batch` call once it holds `local_len` rows, so a decode run
//! compresses once every `local_len` steps instead of on every step.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;

use crate::codebook::CodebookStack;
use crate::codes::CodeMatrix;
use crate::error::{check_dim, invalid_input, Error, Result};
use crate::matrix::Matrix;
use crate::wire::{put_f32s, put_u32, put_u64, put_u8, to_u32, ByteReader};

const SNAPSHOT_MAGIC: &[u8; 4] = b"VQKS";
const SNAPSHOT_VERSION: u32 = 1;

/// Bytes per scalar in the uncompressed (fp16) cache.
pub const RAW_BYTES_PER_SCALAR: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressionSchedule {
    /// Quantize evicted rows together once `local_len` of them are pending.
    Batched,
    /// Quantize each evicted row as soon as it leaves the local window.
    PerStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct WindowPolicy {
    pub init_len: usize,
    pub local_len: usize,
    pub schedule: CompressionSchedule,
}

impl Default for WindowPolicy {
    fn default() -> Self {
        Self {
            init_len: 4,
            local_len: 1024,
            schedule: CompressionSchedule::Batched,
        }
    }
}

impl WindowPolicy {
    pub fn new(init_len: usize, local_len: usize) -> Self {
        Self {
            init_len,
            local_len,
            schedule: CompressionSchedule::Batched,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.local_len == 0 {
            return Err(invalid_input("local window length must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct SegmentLengths {
    pub init: usize,
    pub intermediate: usize,
    pub pending: usize,
    pub local: usize,
}

impl SegmentLengths {
    pub fn total(&self) -> usize {
        self.init + self.intermediate + self.pending + self.local
    }

    pub fn raw(&self) -> usize {
        self.init + self.pending + self.local
    }
}

/// Counts of quantization work done so far.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct CompressionStats {
    pub prefill_batches: u64,
    pub decode_batches: u64,
    pub rows_quantized: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryReport {
    pub total_tokens: u64,
    pub intermediate_rows: u64,
    /// What the whole cache would occupy at 16 bits per scalar.
    pub raw_bytes_equivalent: u64,
    pub compressed_payload_bits: u64,
    pub codebook_overhead_bytes: u64,
    /// Raw segments at 16 bits per scalar, packed codes, and both stacks.
    pub resident_bytes: u64,
    /// `1 - payload_bits / raw_bits` over the intermediate segment; 0 when
    /// nothing is compressed.
    pub effective_ratio: f64,
    /// `1 - resident_bytes / raw_bytes_equivalent`; 0 for an empty cache.
    pub amortized_ratio: f64,
}

/// One cache kind's storage.
#[derive(Debug, Clone, PartialEq)]
struct Segments {
    init: Matrix,
    codes: CodeMatrix,
    /// Residual norm of each intermediate row, recorded when it was quantized.
    residual_norms: Vec<f64>,
    pending: Matrix,
    local: VecDeque<Vec<f64>>,
}

impl Segments {
    fn new(dim: usize, stage_sizes: &[u32]) -> Result<Self> {
        Ok(Self {
            init: Matrix::empty(dim),
            codes: CodeMatrix::new(stage_sizes)?,
            residual_norms: Vec::new(),
            pending: Matrix::empty(dim),
            local: VecDeque::new(),
        })
    }

    fn lengths(&self) -> SegmentLengths {
        SegmentLengths {
            init: self.init.rows(),
            intermediate: self.codes.rows(),
            pending: self.pending.rows(),
            local: self.local.len(),
        }
    }

    fn compress(&mut self, stack: &CodebookStack, rows: &Matrix) -> Result<()> {
        let (codes, norms) = stack.quantize_batch(rows)?;
        self.codes.extend(&codes)?;
        self.residual_norms.extend(norms);
        Ok(())
    }

    /// Copies rows `range` (in token order) into `out`, reconstructing the
    /// intermediate ones. Returns per-row exactness.
    fn gather(
        &self,
        stack: &CodebookStack,
        range: Range<usize>,
        out: &mut Matrix,
    ) -> Result<Vec<bool>> {
        let lens = self.lengths();
        let bounds = [
            lens.init,
            lens.init + lens.intermediate,
            lens.init + lens.intermediate + lens.pending,
            lens.total(),
        ];
        let mut exact = Vec::with_capacity(range.len());
        let clip =
            |lo: usize, hi: usize| range.start.max(lo)..range.end.min(hi).max(range.start.max(lo));

        for r in clip(0, bounds[0]) {
            out.push_row(self.init.row(r))?;
            exact.push(true);
        }
        let mid = clip(bounds[0], bounds[1]);
        if !mid.is_empty() {
            let block =
                stack.reconstruct_block(&self.codes, mid.start - bounds[0]..mid.end - bounds[0])?;
            out.extend(&block)?;
            exact.extend(std::iter::repeat_n(false, mid.len()));
        }
        for r in clip(bounds[1], bounds[2]) {
            out.push_row(self.pending.row(r - bounds[1]))?;
            exact.push(true);
        }
        for r in clip(bounds[2], bounds[3]) {
            out.push_row(&self.local[r - bounds[2]])?;
            exact.push(true);
        }
        Ok(exact)
    }

    fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        put_u32(w, to_u32(self.init.rows(), "init rows")?)?;
        put_f32s(w, self.init.as_slice())?;
        self.codes.write_table_and_payload(w)?;
        put_f32s(w, &self.residual_norms)?;
        put_u32(w, to_u32(self.pending.rows(), "pending rows")?)?;
        put_f32s(w, self.pending.as_slice())?;
        put_u32(w, to_u32(self.local.len(), "local rows")?)?;
        for row in &self.local {
            put_f32s(w, row)?;
        }
        Ok(())
    }

    fn read_from<R: Read>(r: &mut ByteReader<R>, dim: usize) -> Result<Self> {
        let rows = r.u32()? as usize;
        let init = Matrix::from_vec(rows, dim, r.f32s(rows * dim)?)?;
        let codes = CodeMatrix::read_table_and_payload(r)?;
        let residual_norms = r.f32s(codes.rows())?;
        let rows = r.u32()? as usize;
        let pending = Matrix::from_vec(rows, dim, r.f32s(rows * dim)?)?;
        let rows = r.u32()? as usize;
        let mut local = VecDeque::with_capacity(rows);
        for _ in 0..rows {
            local.push_back(r.f32s(dim)?);
        }
        Ok(Self {
            init,
            codes,
            residual_norms,
            pending,
            local,
        })
    }
}

/// Rows returned by [`CacheState::view_block`].
#[derive(Debug, Clone, PartialEq)]
pub struct BlockView {
    pub keys: Matrix,
    pub values: Matrix,
    /// `false` for rows reconstructed from codes.
    pub exact: Vec<bool>,
}

/// The runtime cache for one (layer, head) stream.
///
/// One writer at a time; `view_block` and the other `&self` methods may run
/// concurrently when no write is in progress.
#[derive(Debug, Clone)]
pub struct CacheState {
    policy: WindowPolicy,
    key_stack: Arc<CodebookStack>,
    value_stack: Arc<CodebookStack>,
    keys: Segments,
    values: Segments,
    total_len: usize,
    stats: CompressionStats,
}

impl CacheState {
    pub fn new(
        policy: WindowPolicy,
        key_stack: Arc<CodebookStack>,
        value_stack: Arc<CodebookStack>,
    ) -> Result<Self> {
        policy.validate()?;
        Ok(Self {
            keys: Segments::new(key_stack.dim(), &key_stack.stage_sizes())?,
            values: Segments::new(value_stack.dim(), &value_stack.stage_sizes())?,
            policy,
            key_stack,
            value_stack,
            total_len: 0,
            stats: CompressionStats::default(),
        })
    }

    pub fn policy(&self) -> &WindowPolicy {
        &self.policy
    }

    pub fn key_stack(&self) -> &Arc<CodebookStack> {
        &self.key_stack
    }

    pub fn value_stack(&self) -> &Arc<CodebookStack> {
        &self.value_stack
    }

    pub fn key_dim(&self) -> usize {
        self.key_stack.dim()
    }

    pub fn value_dim(&self) -> usize {
        self.value_stack.dim()
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn is_empty(&self) -> bool {
        self.total_len == 0
    }

    pub fn segments(&self) -> SegmentLengths {
        self.keys.lengths()
    }

    pub fn stats(&self) -> CompressionStats {
        self.stats
    }

    /// Residual norms recorded when each intermediate row was quantized.
    pub fn key_residual_norms(&self) -> &[f64] {
        &self.keys.residual_norms
    }

    pub fn value_residual_norms(&self) -> &[f64] {
        &self.values.residual_norms
    }

    pub fn key_codes(&self) -> &CodeMatrix {
        &self.keys.codes
    }

    pub fn value_codes(&self) -> &CodeMatrix {
        &self.values.codes
    }

    /// Stores a prompt's cache. The first `init_len` rows stay raw, the last
    /// `local_len` of the remainder go to the local window, and everything
    /// between is quantized in one batch. The caller keeps using the
    /// original vectors for the prefill attention pass.
    pub fn prefill(&mut self, keys: &Matrix, values: &Matrix) -> Result<()> {
        if !self.is_empty() {
            return Err(Error::InvalidState("prefill on a non-empty cache".into()));
        }
        check_dim(self.key_dim(), keys.cols(), "prefill keys")?;
        check_dim(self.value_dim(), values.cols(), "prefill values")?;
        let len = keys.rows();
        if len != values.rows() {
            return Err(invalid_input(format!(
                "{len} keys but {} values",
                values.rows()
            )));
        }
        if len == 0 {
            return Err(invalid_input("prefill needs at least one token"));
        }
        if !keys.is_finite() || !values.is_finite() {
            return Err(invalid_input("prefill vectors must be finite"));
        }

        let init_end = len.min(self.policy.init_len);
        let local_len = (len - init_end).min(self.policy.local_len);
        let mid = init_end..len - local_len;

        if !mid.is_empty() {
            self.keys
                .compress(&self.key_stack, &keys.slice_rows(mid.clone()))?;
            self.values
                .compress(&self.value_stack, &values.slice_rows(mid.clone()))?;
            self.stats.prefill_batches += 1;
            self.stats.rows_quantized += mid.len() as u64;
        }
        self.keys.init = keys.slice_rows(0..init_end);
        self.values.init = values.slice_rows(0..init_end);
        for r in mid.end..len {
            self.keys.local.push_back(keys.row(r).to_vec());
            self.values.local.push_back(values.row(r).to_vec());
        }
        self.total_len = len;
        Ok(())
    }

    /// Adds one decoded token.
    pub fn append_token(&mut self, key: &[f64], value: &[f64]) -> Result<()> {
        check_dim(self.key_dim(), key.len(), "append key")?;
        check_dim(self.value_dim(), value.len(), "append value")?;
        if !key.iter().chain(value).all(|v| v.is_finite()) {
            return Err(invalid_input("appended vectors must be finite"));
        }
        self.total_len += 1;
        if self.keys.init.rows() < self.policy.init_len
            && self.total_len == self.keys.init.rows() + 1
        {
            self.keys.init.push_row(key)?;
            self.values.init.push_row(value)?;
            return Ok(());
        }

        self.keys.local.push_back(key.to_vec());
        self.values.local.push_back(value.to_vec());
        if self.keys.local.len() <= self.policy.local_len {
            return Ok(());
        }
        let k = self
            .keys
            .local
            .pop_front()
            .expect("window is over capacity");
        let v = self
            .values
            .local
            .pop_front()
            .expect("window is over capacity");
        self.keys.pending.push_row(&k)?;
        self.values.pending.push_row(&v)?;

        let threshold = match self.policy.schedule {
            CompressionSchedule::Batched => self.policy.local_len,
            CompressionSchedule::PerStep => 1,
        };
        if self.keys.pending.rows() >= threshold {
            self.flush_pending()?;
        }
        Ok(())
    }

    fn flush_pending(&mut self) -> Result<()> {
        let rows = self.keys.pending.rows();
        let (key_dim, value_dim) = (self.key_dim(), self.value_dim());
        let pending_keys = std::mem::replace(&mut self.keys.pending, Matrix::empty(key_dim));
        let pending_values = std::mem::replace(&mut self.values.pending, Matrix::empty(value_dim));
        self.keys.compress(&self.key_stack, &pending_keys)?;
        self.values.compress(&self.value_stack, &pending_values)?;
        self.stats.decode_batches += 1;
        self.stats.rows_quantized += rows as u64;
        Ok(())
    }

    /// Rows `range` of the logical cache in token order. Raw segments are
    /// copied exactly; intermediate rows are rebuilt from their codes.
    pub fn view_block(&self, range: Range<usize>) -> Result<BlockView> {
        if range.start > range.end || range.end > self.total_len {
            return Err(invalid_input(format!(
                "row range {}..{} outside 0..{}",
                range.start, range.end, self.total_len
            )));
        }
        let mut keys = Matrix::empty(self.key_dim());
        let mut values = Matrix::empty(self.value_dim());
        let exact = self
            .keys
            .gather(&self.key_stack, range.clone(), &mut keys)?;
        self.values.gather(&self.value_stack, range, &mut values)?;
        Ok(BlockView {
            keys,
            values,
            exact,
        })
    }

    pub fn memory_report(&self) -> MemoryReport {
        let overhead = self.key_stack.serialized_len() + self.value_stack.serialized_len();
        memory_report(
            self.segments(),
            self.key_dim(),
            self.value_dim(),
            self.keys.codes.payload_bits() + self.values.codes.payload_bits(),
            if self.is_empty() { 0 } else { overhead },
        )
    }

    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        put_u32(&mut w, SNAPSHOT_VERSION)?;
        put_u32(&mut w, to_u32(self.policy.init_len, "init length")?)?;
        put_u32(&mut w, to_u32(self.policy.local_len, "local length")?)?;
        put_u8(
            &mut w,
            match self.policy.schedule {
                CompressionSchedule::Batched => 0,
                CompressionSchedule::PerStep => 1,
            },
        )?;
        put_u64(&mut w, self.total_len as u64)?;
        put_u32(&mut w, to_u32(self.key_dim(), "key dimension")?)?;
        put_u32(&mut w, to_u32(self.value_dim(), "value dimension")?)?;
        w.write_all(&self.key_stack.content_hash())?;
        w.write_all(&self.value_stack.content_hash())?;
        put_u64(&mut w, self.stats.prefill_batches)?;
        put_u64(&mut w, self.stats.decode_batches)?;
        put_u64(&mut w, self.stats.rows_quantized)?;
        self.keys.write_to(&mut w)?;
        self.values.write_to(&mut w)?;
        Ok(())
    }

    pub fn save_snapshot(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_snapshot(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Rebuilds a cache from a snapshot and the stacks it was made with.
    pub fn from_snapshot(
        snapshot: CacheSnapshot,
        key_stack: Arc<CodebookStack>,
        value_stack: Arc<CodebookStack>,
    ) -> Result<Self> {
        if key_stack.content_hash() != snapshot.key_stack_hash
            || value_stack.content_hash() != snapshot.value_stack_hash
        {
            return Err(invalid_input(
                "snapshot was written with different codebook stacks",
            ));
        }
        Ok(Self {
            policy: snapshot.policy,
            key_stack,
            value_stack,
            keys: snapshot.keys,
            values: snapshot.values,
            total_len: snapshot.total_len,
            stats: snapshot.stats,
        })
    }
}

fn memory_report(
    lens: SegmentLengths,
    key_dim: usize,
    value_dim: usize,
    payload_bits: u64,
    overhead_bytes: u64,
) -> MemoryReport {
    let per_token_raw = (key_dim + value_dim) as u64 * RAW_BYTES_PER_SCALAR;
    let raw_bytes_equivalent = lens.total() as u64 * per_token_raw;
    let intermediate_raw_bits = lens.intermediate as u64 * per_token_raw * 8;
    let resident_bytes =
        lens.raw() as u64 * per_token_raw + payload_bits.div_ceil(8) + overhead_bytes;
    MemoryReport {
        total_tokens: lens.total() as u64,
        intermediate_rows: lens.intermediate as u64,
        raw_bytes_equivalent,
        compressed_payload_bits: payload_bits,
        codebook_overhead_bytes: overhead_bytes,
        resident_bytes,
        effective_ratio: if intermediate_raw_bits == 0 {
            0.0
        } else {
            1.0 - payload_bits as f64 / intermediate_raw_bits as f64
        },
        amortized_ratio: if raw_bytes_equivalent == 0 {
            0.0
        } else {
            1.0 - resident_bytes as f64 / raw_bytes_equivalent as f64
        },
    }
}

/// A decoded `VQKS` snapshot, not yet bound to codebook stacks.
///
/// Layout (little-endian): magic, version, init_len u32, local_len u32,
/// schedule u8, total_len u64, key D u32, value D u32, key and value stack
/// SHA-256 hashes, three u64 counters, then keys and values, each as:
/// init rows (u32 count + f32 data), code stage table + bit-packed payload,
/// per-row residual norms (f32), pending rows, local rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheSnapshot {
    pub policy: WindowPolicy,
    pub total_len: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub key_stack_hash: [u8; 32],
    pub value_stack_hash: [u8; 32],
    pub stats: CompressionStats,
    keys: Segments,
    values: Segments,
}

impl CacheSnapshot {
    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = ByteReader::new(r);
        r.magic(SNAPSHOT_MAGIC)?;
        let version = r.u32()?;
        if version != SNAPSHOT_VERSION {
            return Err(r.format_error(format!("unsupported snapshot version {version}")));
        }
        let init_len = r.u32()? as usize;
        let local_len = r.u32()? as usize;
        let at = r.offset();
        let schedule = match r.u8()? {
            0 => CompressionSchedule::Batched,
            1 => CompressionSchedule::PerStep,
            other => {
                return Err(Error::Format {
                    offset: at,
                    message: format!("unknown compression schedule {other}"),
                })
            }
        };
        let total_len = r.u64()? as usize;
        let key_dim = r.u32()? as usize;
        let value_dim = r.u32()? as usize;
        if key_dim == 0 || value_dim == 0 {
            return Err(r.format_error("zero dimension"));
        }
        let mut key_stack_hash = [0u8; 32];
        r.read_exact(&mut key_stack_hash)?;
        let mut value_stack_hash = [0u8; 32];
        r.read_exact(&mut value_stack_hash)?;
        let stats = CompressionStats {
            prefill_batches: r.u64()?,
            decode_batches: r.u64()?,
            rows_quantized: r.u64()?,
        };
        let keys = Segments::read_from(&mut r, key_dim)?;
        let values = Segments::read_from(&mut r, value_dim)?;
        r.expect_eof()?;
        if keys.lengths() != values.lengths() || keys.lengths().total() != total_len {
            return Err(r.format_error("segment lengths disagree with the token count"));
        }
        Ok(Self {
            policy: WindowPolicy {
                init_len,
                local_len,
                schedule,
            },
            total_len,
            key_dim,
            value_dim,
            key_stack_hash,
            value_stack_hash,
            stats,
            keys,
            values,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    pub fn segments(&self) -> SegmentLengths {
        self.keys.lengths()
    }

    /// Same accounting as [`CacheState::memory_report`], with codebook
    /// overhead derived from the stage-size tables.
    pub fn memory_report(&self) -> MemoryReport {
        let overhead =
            CodebookStack::serialized_len_for(self.key_dim, self.keys.codes.stage_sizes())
                + CodebookStack::serialized_len_for(
                    self.value_dim,
                    self.values.codes.stage_sizes(),
                );
        memory_report(
            self.segments(),
            self.key_dim,
            self.value_dim,
            self.keys.codes.payload_bits() + self.values.codes.payload_bits(),
            if self.total_len == 0 { 0 } else { overhead },
        )
    }

    pub fn key_stage_sizes(&self) -> &[u32] {
        self.keys.codes.stage_sizes()
    }

    pub fn value_stage_sizes(&self) -> &[u32] {
        self.values.codes.stage_sizes()
    }
}

/// Independent per-(layer, head) caches with summed accounting.
#[derive(Debug, Clone, Default)]
pub struct CacheGroup {
    pub streams: Vec<CacheState>,
}

impl CacheGroup {
    pub fn memory_report(&self) -> MemoryReport {
        let mut total = MemoryReport {
            total_tokens: 0,
            intermediate_rows: 0,
            raw_bytes_equivalent: 0,
            compressed_payload_bits: 0,
            codebook_overhead_bytes: 0,
            resident_bytes: 0,
            effective_ratio: 0.0,
            amortized_ratio: 0.0,
        };
        let mut intermediate_raw_bits = 0u64;
        for s in &self.streams {
            let r = s.memory_report();
            total.total_tokens += r.total_tokens;
            total.intermediate_rows += r.intermediate_rows;
            total.raw_bytes_equivalent += r.raw_bytes_equivalent;
            total.compressed_payload_bits += r.compressed_payload_bits;
            total.codebook_overhead_bytes += r.codebook_overhead_bytes;
            total.resident_bytes += r.resident_bytes;
            intermediate_raw_bits += r.intermediate_rows
                * (s.key_dim() + s.value_dim()) as u64
                * RAW_BYTES_PER_SCALAR
                * 8;
        }
        if intermediate_raw_bits > 0 {
            total.effective_ratio =
                1.0 - total.compressed_payload_bits as f64 / intermediate_raw_bits as f64;
        }
        if total.raw_bytes_equivalent > 0 {
            total.amortized_ratio =
                1.0 - total.resident_bytes as f64 / total.raw_bytes_equivalent as f64;
        }
        total
    }
}
