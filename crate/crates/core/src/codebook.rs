//! Residual SimVQ quantizer.
//!
//! Each stage owns raw entries `q_1..q_S` and a `D x D` projection `W`.
//! Search and reconstruction both use the projected ("effective") entries
//! `W q_i`, precomputed when the codebook is built or loaded. A
//! [`CodebookStack`] chains stages so that stage `i` quantizes the residual
//! left by stage `i - 1`.

use std::fmt;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::codes::{CodeMatrix, CodeVector};
use crate::error::{check_dim, invalid_input, Error, Result};
use crate::matrix::{squared_distance, Matrix};
use crate::wire::{put_f32s, put_u32, put_u8, to_u32, ByteReader};

const STACK_MAGIC: &[u8; 4] = b"RSVQ";
const STACK_VERSION: u32 = 1;

/// Entries per block when scanning a codebook for a batch of rows.
pub const DEFAULT_BLOCK_ENTRIES: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CacheKind {
    Key,
    Value,
}

impl CacheKind {
    fn to_byte(self) -> u8 {
        match self {
            CacheKind::Key => 0,
            CacheKind::Value => 1,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(CacheKind::Key),
            1 => Some(CacheKind::Value),
            _ => None,
        }
    }
}

impl fmt::Display for CacheKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CacheKind::Key => "key",
            CacheKind::Value => "value",
        })
    }
}

/// One residual stage: `S` raw entries, a projection, and the cached
/// projected entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    entries: Matrix,
    projection: Matrix,
    effective: Matrix,
}

impl Codebook {
    pub fn new(entries: Matrix, projection: Matrix) -> Result<Self> {
        let (s, d) = (entries.rows(), entries.cols());
        if s == 0 || d == 0 {
            return Err(invalid_input(format!(
                "codebook must be non-empty, got {s}x{d}"
            )));
        }
        if u32::try_from(s).is_err() {
            return Err(invalid_input(format!("codebook size {s} exceeds u32")));
        }
        if projection.rows() != d || projection.cols() != d {
            return Err(invalid_input(format!(
                "projection must be {d}x{d}, got {}x{}",
                projection.rows(),
                projection.cols()
            )));
        }
        if !entries.is_finite() || !projection.is_finite() {
            return Err(invalid_input("codebook contains non-finite values"));
        }
        let effective = project(&entries, &projection);
        Ok(Self {
            entries,
            projection,
            effective,
        })
    }

    /// Codebook whose projection is the identity, so effective entries equal
    /// the raw entries.
    pub fn with_identity(entries: Matrix) -> Result<Self> {
        let d = entries.cols();
        Self::new(entries, Matrix::identity(d))
    }

    pub fn size(&self) -> usize {
        self.entries.rows()
    }

    pub fn dim(&self) -> usize {
        self.entries.cols()
    }

    pub fn entries(&self) -> &Matrix {
        &self.entries
    }

    pub fn projection(&self) -> &Matrix {
        &self.projection
    }

    pub fn effective_entries(&self) -> &Matrix {
        &self.effective
    }

    pub fn effective_entry(&self, i: usize) -> &[f64] {
        self.effective.row(i)
    }

    /// Index of the effective entry closest to `x` and the Euclidean
    /// distance to it. Ties go to the lowest index.
    pub fn nearest_entry(&self, x: &[f64]) -> Result<(usize, f64)> {
        check_dim(self.dim(), x.len(), "nearest_entry")?;
        let (i, sq) = self.nearest_sq(x);
        Ok((i, sq.sqrt()))
    }

    #[inline]
    pub(crate) fn nearest_sq(&self, x: &[f64]) -> (usize, f64) {
        let mut best = (0usize, f64::INFINITY);
        for (i, e) in self.effective.iter_rows().enumerate() {
            let d = squared_distance(x, e);
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    pub(crate) fn into_parts(self) -> (Matrix, Matrix) {
        (self.entries, self.projection)
    }

    fn serialized_len(&self) -> u64 {
        let (s, d) = (self.size() as u64, self.dim() as u64);
        8 + 4 * s * d + 4 * d * d
    }
}

/// `entries * projection^T`, i.e. `W q_i` for every row `q_i`.
fn project(entries: &Matrix, projection: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(entries.rows(), entries.cols());
    for i in 0..entries.rows() {
        projection.mul_vec_into(entries.row(i), out.row_mut(i));
    }
    out
}

/// Ordered residual stages for one cache kind.
///
/// Immutable once built: any number of threads may quantize or reconstruct
/// against a shared stack.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookStack {
    stages: Vec<Codebook>,
    kind: CacheKind,
    block_entries: usize,
}

impl CodebookStack {
    pub fn new(stages: Vec<Codebook>, kind: CacheKind) -> Result<Self> {
        let first = stages
            .first()
            .ok_or_else(|| invalid_input("codebook stack needs at least one stage"))?;
        let d = first.dim();
        if let Some(i) = stages.iter().position(|s| s.dim() != d) {
            return Err(invalid_input(format!(
                "stage {i} has dimension {}, stage 0 has {d}",
                stages[i].dim()
            )));
        }
        Ok(Self {
            stages,
            kind,
            block_entries: DEFAULT_BLOCK_ENTRIES,
        })
    }

    /// Overrides the number of entries scanned per block in batched search.
    pub fn with_block_entries(mut self, block_entries: usize) -> Self {
        self.block_entries = block_entries.max(1);
        self
    }

    pub fn block_entries(&self) -> usize {
        self.block_entries
    }

    pub fn kind(&self) -> CacheKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.stages[0].dim()
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn stages(&self) -> &[Codebook] {
        &self.stages
    }

    pub fn stage_sizes(&self) -> Vec<u32> {
        self.stages.iter().map(|s| s.size() as u32).collect()
    }

    /// The first `n` stages as a stack of their own.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.num_stages() {
            return Err(invalid_input(format!(
                "cannot truncate a {}-stage stack to {n} stages",
                self.num_stages()
            )));
        }
        Ok(Self {
            stages: self.stages[..n].to_vec(),
            kind: self.kind,
            block_entries: self.block_entries,
        })
    }

    /// Greedy residual encoding. Returns the per-stage indices and the
    /// residual left after the last stage.
    pub fn quantize(&self, x: &[f64]) -> Result<(CodeVector, Vec<f64>)> {
        check_dim(self.dim(), x.len(), "quantize")?;
        let mut residual = x.to_vec();
        let mut codes = Vec::with_capacity(self.num_stages());
        for stage in &self.stages {
            let (i, _) = stage.nearest_sq(&residual);
            subtract_in_place(&mut residual, stage.effective_entry(i));
            codes.push(i as u32);
        }
        Ok((CodeVector::new(codes), residual))
    }

    /// Sum of the selected effective entries, in stage order.
    pub fn reconstruct(&self, codes: &CodeVector) -> Result<Vec<f64>> {
        self.check_codes(codes.indices())?;
        let mut out = vec![0.0; self.dim()];
        self.accumulate(codes.indices(), &mut out);
        Ok(out)
    }

    fn accumulate(&self, indices: &[u32], out: &mut [f64]) {
        for (stage, &i) in self.stages.iter().zip(indices) {
            for (o, e) in out.iter_mut().zip(stage.effective_entry(i as usize)) {
                *o += e;
            }
        }
    }

    fn check_codes(&self, indices: &[u32]) -> Result<()> {
        if indices.len() != self.num_stages() {
            return Err(Error::InvalidCode(format!(
                "{} indices for a {}-stage stack",
                indices.len(),
                self.num_stages()
            )));
        }
        for (s, (&i, stage)) in indices.iter().zip(&self.stages).enumerate() {
            if i as usize >= stage.size() {
                return Err(Error::InvalidCode(format!(
                    "index {i} at stage {s} is not below codebook size {}",
                    stage.size()
                )));
            }
        }
        Ok(())
    }

    /// Quantizes every row of `xs`.
    ///
    /// Entries are scanned in blocks of `block_entries`, each block visited
    /// for all rows before moving on. Distances are computed by the same
    /// routine and compared in the same entry order as [`Self::quantize`],
    /// so the indices are bit-identical to row-by-row quantization.
    pub fn quantize_batch(&self, xs: &Matrix) -> Result<(CodeMatrix, Vec<f64>)> {
        check_dim(self.dim(), xs.cols(), "quantize_batch")?;
        let n = xs.rows();
        let mut residual = xs.clone();
        let mut indices = vec![0u32; n * self.num_stages()];
        let mut best = vec![(0usize, f64::INFINITY); n];

        for (s, stage) in self.stages.iter().enumerate() {
            best.fill((0, f64::INFINITY));
            let effective = stage.effective_entries();
            let mut start = 0;
            while start < stage.size() {
                let end = (start + self.block_entries).min(stage.size());
                for (r, slot) in best.iter_mut().enumerate() {
                    let row = residual.row(r);
                    for i in start..end {
                        let d = squared_distance(row, effective.row(i));
                        if d < slot.1 {
                            *slot = (i, d);
                        }
                    }
                }
                start = end;
            }
            for (r, &(i, _)) in best.iter().enumerate() {
                subtract_in_place(residual.row_mut(r), effective.row(i));
                indices[r * self.num_stages() + s] = i as u32;
            }
        }

        let mut codes = CodeMatrix::new(&self.stage_sizes())?;
        for row in indices.chunks_exact(self.num_stages()) {
            codes.push_indices(row)?;
        }
        let norms = residual.iter_rows().map(crate::matrix::norm).collect();
        Ok((codes, norms))
    }

    /// Reconstructs rows `range` of `codes` (and only those).
    pub fn reconstruct_block(&self, codes: &CodeMatrix, range: Range<usize>) -> Result<Matrix> {
        if codes.stage_sizes() != self.stage_sizes().as_slice() {
            return Err(invalid_input("code matrix was not produced by this stack"));
        }
        if range.start > range.end || range.end > codes.rows() {
            return Err(invalid_input(format!(
                "row range {}..{} outside 0..{}",
                range.start,
                range.end,
                codes.rows()
            )));
        }
        let mut out = Matrix::zeros(range.len(), self.dim());
        let mut idx = vec![0u32; self.num_stages()];
        for (k, r) in range.enumerate() {
            codes.read_row_into(r, &mut idx);
            self.accumulate(&idx, out.row_mut(k));
        }
        Ok(out)
    }

    /// Rounds every stored parameter to f32, the precision of the file
    /// format, and recomputes effective entries.
    pub fn rounded_to_f32(&self) -> Result<Self> {
        let stages = self
            .stages
            .iter()
            .map(|s| {
                let round = |m: &Matrix| {
                    let data = m.as_slice().iter().map(|&v| v as f32 as f64).collect();
                    Matrix::from_vec(m.rows(), m.cols(), data)
                };
                Codebook::new(round(s.entries())?, round(s.projection())?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            stages,
            kind: self.kind,
            block_entries: self.block_entries,
        })
    }

    /// Size in bytes of the serialized `RSVQ` file.
    pub fn serialized_len(&self) -> u64 {
        13 + self
            .stages
            .iter()
            .map(Codebook::serialized_len)
            .sum::<u64>()
    }

    /// Serialized size of a stack with the given shape, without building it.
    pub fn serialized_len_for(dim: usize, stage_sizes: &[u32]) -> u64 {
        let d = dim as u64;
        13 + stage_sizes
            .iter()
            .map(|&s| 8 + 4 * s as u64 * d + 4 * d * d)
            .sum::<u64>()
    }

    /// SHA-256 over the serialized bytes.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut bytes = Vec::with_capacity(self.serialized_len() as usize);
        self.write_to(&mut bytes)
            .expect("writing to a Vec cannot fail");
        Sha256::digest(&bytes).into()
    }

    /// Writes the `RSVQ` format: magic, version, kind, N, then per stage
    /// S, D, entries and projection as row-major f32. Effective entries are
    /// not stored.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(STACK_MAGIC)?;
        put_u32(&mut w, STACK_VERSION)?;
        put_u8(&mut w, self.kind.to_byte())?;
        put_u32(&mut w, to_u32(self.num_stages(), "stage count")?)?;
        for stage in &self.stages {
            put_u32(&mut w, stage.size() as u32)?;
            put_u32(&mut w, to_u32(stage.dim(), "dimension")?)?;
            put_f32s(&mut w, stage.entries().as_slice())?;
            put_f32s(&mut w, stage.projection().as_slice())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = ByteReader::new(r);
        r.magic(STACK_MAGIC)?;
        let version = r.u32()?;
        if version != STACK_VERSION {
            return Err(r.format_error(format!("unsupported stack version {version}")));
        }
        let at = r.offset();
        let kind = CacheKind::from_byte(r.u8()?).ok_or_else(|| Error::Format {
            offset: at,
            message: "cache kind must be 0 (key) or 1 (value)".into(),
        })?;
        let n = r.u32()?;
        if n == 0 {
            return Err(r.format_error("stack has zero stages"));
        }
        let mut stages = Vec::with_capacity(n.min(1024) as usize);
        let mut dim = None;
        for _ in 0..n {
            let at = r.offset();
            let s = r.u32()? as usize;
            let d = r.u32()? as usize;
            if s == 0 || d == 0 {
                return Err(Error::Format {
                    offset: at,
                    message: format!("empty codebook {s}x{d}"),
                });
            }
            if *dim.get_or_insert(d) != d {
                return Err(Error::Format {
                    offset: at,
                    message: format!("stage dimension {d} differs from {}", dim.unwrap()),
                });
            }
            let entries = Matrix::from_vec(s, d, r.f32s(s * d)?)?;
            let projection = Matrix::from_vec(d, d, r.f32s(d * d)?)?;
            stages.push(Codebook::new(entries, projection)?);
        }
        r.expect_eof()?;
        Self::new(stages, kind)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }

    pub(crate) fn into_stages(self) -> Vec<Codebook> {
        self.stages
    }
}

#[inline]
fn subtract_in_place(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x -= y;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_book(rows: &[&[f64]]) -> Codebook {
        let d = rows[0].len();
        Codebook::with_identity(Matrix::from_rows(d, rows).unwrap()).unwrap()
    }

    #[test]
    fn nearest_entry_picks_closest() {
        let book = identity_book(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let (i, d) = book.nearest_entry(&[0.9, 0.1]).unwrap();
        // brute force over the three entries: 0.9055, 0.1414, 1.2042
        let brute: Vec<f64> = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]
            .iter()
            .map(|e| ((0.9f64 - e[0]).powi(2) + (0.1f64 - e[1]).powi(2)).sqrt())
            .collect();
        assert_eq!(i, 1);
        assert!((d - brute[1]).abs() < 1e-12);
        assert!((d - 0.141_421_356_237_309_5).abs() < 1e-12);
    }

    #[test]
    fn exact_match_has_zero_distance() {
        let book = identity_book(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(book.nearest_entry(&[0.0, 1.0]).unwrap(), (2, 0.0));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let book = identity_book(&[&[1.0, 0.0], &[1.0, 0.0]]);
        assert_eq!(book.nearest_entry(&[1.0, 0.0]).unwrap().0, 0);
    }

    #[test]
    fn dimension_mismatch_is_invalid_input() {
        let book = identity_book(&[&[1.0, 0.0]]);
        assert!(matches!(
            book.nearest_entry(&[1.0]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn projection_is_applied_to_entries() {
        let entries = Matrix::from_rows(2, &[[1.0, 2.0], [3.0, -1.0]]).unwrap();
        let w = Matrix::from_rows(2, &[[0.0, 1.0], [2.0, 0.0]]).unwrap();
        let book = Codebook::new(entries, w).unwrap();
        assert_eq!(book.effective_entry(0), &[2.0, 2.0]);
        assert_eq!(book.effective_entry(1), &[-1.0, 6.0]);
    }

    fn two_stage() -> CodebookStack {
        CodebookStack::new(
            vec![
                identity_book(&[&[1.0, 0.0], &[0.0, 1.0]]),
                identity_book(&[&[0.0, 0.5], &[0.5, 0.0]]),
            ],
            CacheKind::Key,
        )
        .unwrap()
    }

    #[test]
    fn quantize_two_stage_example() {
        let stack = two_stage();
        let (codes, residual) = stack.quantize(&[1.2, 0.4]).unwrap();
        assert_eq!(codes.indices(), &[0, 0]);
        assert!((residual[0] - 0.2).abs() < 1e-12);
        assert!((residual[1] + 0.1).abs() < 1e-12);
        let recon = stack.reconstruct(&codes).unwrap();
        assert_eq!(recon, vec![1.0, 0.5]);
    }

    #[test]
    fn zero_codebooks_are_no_ops() {
        let stack = CodebookStack::new(
            vec![
                identity_book(&[&[0.0; 3], &[0.0; 3]]),
                identity_book(&[&[0.0; 3]]),
            ],
            CacheKind::Value,
        )
        .unwrap();
        let x = [0.3, -2.0, 7.5];
        let (codes, residual) = stack.quantize(&x).unwrap();
        assert_eq!(codes.indices(), &[0, 0]);
        assert_eq!(residual, x.to_vec());
    }

    #[test]
    fn single_stage_exact_vector_leaves_zero_residual() {
        let stack = CodebookStack::new(
            vec![identity_book(&[&[5.0, 5.0], &[0.25, -3.0]])],
            CacheKind::Key,
        )
        .unwrap();
        let (codes, residual) = stack.quantize(&[0.25, -3.0]).unwrap();
        assert_eq!(codes.indices(), &[1]);
        assert_eq!(residual, vec![0.0, 0.0]);
        assert_eq!(stack.reconstruct(&codes).unwrap(), vec![0.25, -3.0]);
    }

    #[test]
    fn reconstruct_rejects_bad_codes() {
        let stack = two_stage();
        assert!(matches!(
            stack.reconstruct(&CodeVector::new(vec![2, 0])),
            Err(Error::InvalidCode(_))
        ));
        assert!(matches!(
            stack.reconstruct(&CodeVector::new(vec![0])),
            Err(Error::InvalidCode(_))
        ));
    }

    #[test]
    fn empty_batch_and_empty_block() {
        let stack = two_stage();
        let (codes, norms) = stack.quantize_batch(&Matrix::empty(2)).unwrap();
        assert_eq!(codes.rows(), 0);
        assert!(norms.is_empty());
        assert_eq!(stack.reconstruct_block(&codes, 0..0).unwrap().rows(), 0);
        assert!(stack.reconstruct_block(&codes, 0..1).is_err());
    }

    #[test]
    fn batch_of_exact_entries() {
        let book = identity_book(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0], &[7.0, 8.0]]);
        let stack = CodebookStack::new(vec![book], CacheKind::Key).unwrap();
        let xs = Matrix::from_rows(2, &[[5.0, 6.0], [1.0, 2.0], [7.0, 8.0]]).unwrap();
        let (codes, norms) = stack.quantize_batch(&xs).unwrap();
        let got: Vec<u32> = codes
            .to_code_vectors()
            .iter()
            .map(|c| c.indices()[0])
            .collect();
        assert_eq!(got, vec![2, 0, 3]);
        assert_eq!(norms, vec![0.0; 3]);
    }

    #[test]
    fn stack_rejects_mixed_dimensions() {
        let a = identity_book(&[&[1.0, 0.0]]);
        let b = identity_book(&[&[1.0, 0.0, 0.0]]);
        assert!(CodebookStack::new(vec![a, b], CacheKind::Key).is_err());
        assert!(CodebookStack::new(vec![], CacheKind::Key).is_err());
    }

    #[test]
    fn serialized_len_matches_written_bytes() {
        let stack = two_stage();
        let mut bytes = Vec::new();
        stack.write_to(&mut bytes).unwrap();
        assert_eq!(bytes.len() as u64, stack.serialized_len());
        assert_eq!(
            CodebookStack::serialized_len_for(2, &stack.stage_sizes()),
            stack.serialized_len()
        );
        let back = CodebookStack::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, stack);
        assert_eq!(back.content_hash(), stack.content_hash());
    }

    #[test]
    fn bad_magic_and_kind_report_offsets() {
        let stack = two_stage();
        let mut bytes = Vec::new();
        stack.write_to(&mut bytes).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            CodebookStack::read_from(bad.as_slice()),
            Err(Error::Format { offset: 0, .. })
        ));

        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(
            CodebookStack::read_from(bad.as_slice()),
            Err(Error::Format { offset: 8, .. })
        ));

        let mut long = bytes;
        long.push(0);
        assert!(matches!(
            CodebookStack::read_from(long.as_slice()),
            Err(Error::Format { .. })
        ));
    }
}
