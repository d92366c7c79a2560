//! Integer code storage.
//!
//! A [`CodeMatrix`] holds `L` code vectors (one index per quantizer stage)
//! bit-packed at `ceil(log2 S_i)` bits per index, LSB-first, row-major.
//! Appending never touches bits belonging to earlier rows.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::wire::{put_u32, put_u64, to_u32, ByteReader};

const CODES_MAGIC: &[u8; 4] = b"VQKC";
const CODES_VERSION: u32 = 1;

/// Bits needed to store any index below `size`, i.e. `ceil(log2 size)`.
pub fn index_bits(size: u32) -> u32 {
    if size <= 1 {
        0
    } else {
        u32::BITS - (size - 1).leading_zeros()
    }
}

/// One index per stage of a codebook stack.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct CodeVector(Vec<u32>);

impl CodeVector {
    pub fn new(indices: Vec<u32>) -> Self {
        Self(indices)
    }

    pub fn indices(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<u32> {
        self.0
    }
}

impl From<Vec<u32>> for CodeVector {
    fn from(v: Vec<u32>) -> Self {
        Self(v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeMatrix {
    stage_sizes: Vec<u32>,
    stage_bits: Vec<u32>,
    row_bits: u64,
    rows: usize,
    payload: Vec<u8>,
}

impl CodeMatrix {
    pub fn new(stage_sizes: &[u32]) -> Result<Self> {
        if stage_sizes.is_empty() {
            return Err(Error::InvalidInput(
                "code matrix needs at least one stage".into(),
            ));
        }
        if let Some(i) = stage_sizes.iter().position(|&s| s == 0) {
            return Err(Error::InvalidInput(format!(
                "stage {i} has codebook size 0"
            )));
        }
        let stage_bits: Vec<u32> = stage_sizes.iter().map(|&s| index_bits(s)).collect();
        let row_bits = stage_bits.iter().map(|&b| b as u64).sum();
        Ok(Self {
            stage_sizes: stage_sizes.to_vec(),
            stage_bits,
            row_bits,
            rows: 0,
            payload: Vec::new(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn stages(&self) -> usize {
        self.stage_sizes.len()
    }

    pub fn stage_sizes(&self) -> &[u32] {
        &self.stage_sizes
    }

    /// Packed bits per row: the sum of `ceil(log2 S_i)` over stages.
    pub fn row_bits(&self) -> u64 {
        self.row_bits
    }

    /// Exact number of meaningful payload bits.
    pub fn payload_bits(&self) -> u64 {
        self.row_bits * self.rows as u64
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn push(&mut self, codes: &CodeVector) -> Result<()> {
        self.push_indices(codes.indices())
    }

    pub fn push_indices(&mut self, indices: &[u32]) -> Result<()> {
        self.validate(indices)?;
        let total_bits = self.payload_bits() + self.row_bits;
        self.payload.resize(total_bits.div_ceil(8) as usize, 0);
        let mut pos = self.payload_bits();
        for (&idx, &bits) in indices.iter().zip(&self.stage_bits) {
            write_bits(&mut self.payload, pos, idx, bits);
            pos += bits as u64;
        }
        self.rows += 1;
        Ok(())
    }

    /// Appends every row of `other`, which must share the stage-size table.
    pub fn extend(&mut self, other: &CodeMatrix) -> Result<()> {
        if other.stage_sizes != self.stage_sizes {
            return Err(Error::InvalidInput("stage-size tables differ".into()));
        }
        let mut buf = vec![0u32; self.stages()];
        for r in 0..other.rows {
            other.read_row_into(r, &mut buf);
            self.push_indices(&buf)?;
        }
        Ok(())
    }

    pub fn get(&self, row: usize, stage: usize) -> u32 {
        assert!(row < self.rows && stage < self.stages());
        let offset: u64 = self.stage_bits[..stage].iter().map(|&b| b as u64).sum();
        read_bits(
            &self.payload,
            row as u64 * self.row_bits + offset,
            self.stage_bits[stage],
        )
    }

    /// Unpacks row `row` into `out` (length = number of stages).
    pub fn read_row_into(&self, row: usize, out: &mut [u32]) {
        assert!(
            row < self.rows,
            "row {row} out of range ({} rows)",
            self.rows
        );
        assert_eq!(out.len(), self.stages());
        let mut pos = row as u64 * self.row_bits;
        for (o, &bits) in out.iter_mut().zip(&self.stage_bits) {
            *o = read_bits(&self.payload, pos, bits);
            pos += bits as u64;
        }
    }

    pub fn row(&self, row: usize) -> CodeVector {
        let mut out = vec![0u32; self.stages()];
        self.read_row_into(row, &mut out);
        CodeVector(out)
    }

    /// Widened view: one `CodeVector` per row.
    pub fn to_code_vectors(&self) -> Vec<CodeVector> {
        (0..self.rows).map(|r| self.row(r)).collect()
    }

    pub fn from_code_vectors(stage_sizes: &[u32], rows: &[CodeVector]) -> Result<Self> {
        let mut m = Self::new(stage_sizes)?;
        for r in rows {
            m.push(r)?;
        }
        Ok(m)
    }

    /// Rebuilds a matrix from a packed payload, validating every index.
    pub fn from_payload(stage_sizes: &[u32], rows: usize, payload: Vec<u8>) -> Result<Self> {
        let mut m = Self::new(stage_sizes)?;
        let expected = (m.row_bits * rows as u64).div_ceil(8);
        if payload.len() as u64 != expected {
            return Err(Error::InvalidInput(format!(
                "payload has {} bytes, {rows} rows need {expected}",
                payload.len()
            )));
        }
        m.payload = payload;
        m.rows = rows;
        let mut buf = vec![0u32; m.stages()];
        for r in 0..rows {
            m.read_row_into(r, &mut buf);
            m.validate(&buf)?;
        }
        Ok(m)
    }

    fn validate(&self, indices: &[u32]) -> Result<()> {
        if indices.len() != self.stages() {
            return Err(Error::InvalidCode(format!(
                "code vector has {} indices, stack has {} stages",
                indices.len(),
                self.stages()
            )));
        }
        for (stage, (&idx, &size)) in indices.iter().zip(&self.stage_sizes).enumerate() {
            if idx >= size {
                return Err(Error::InvalidCode(format!(
                    "index {idx} at stage {stage} is not below codebook size {size}"
                )));
            }
        }
        Ok(())
    }

    /// Serializes as `VQKC`: magic, version, N, stage sizes, row count,
    /// payload length, payload.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CODES_MAGIC)?;
        put_u32(&mut w, CODES_VERSION)?;
        put_u32(&mut w, to_u32(self.stages(), "stage count")?)?;
        for &s in &self.stage_sizes {
            put_u32(&mut w, s)?;
        }
        put_u64(&mut w, self.rows as u64)?;
        put_u64(&mut w, self.payload.len() as u64)?;
        w.write_all(&self.payload)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = ByteReader::new(r);
        let m = Self::read_body(&mut r)?;
        r.expect_eof()?;
        Ok(m)
    }

    pub(crate) fn read_body<R: Read>(r: &mut ByteReader<R>) -> Result<Self> {
        r.magic(CODES_MAGIC)?;
        let version = r.u32()?;
        if version != CODES_VERSION {
            return Err(r.format_error(format!("unsupported code-matrix version {version}")));
        }
        Self::read_table_and_payload(r)
    }

    /// Stage table, row count and payload; shared with the cache snapshot.
    pub(crate) fn read_table_and_payload<R: Read>(r: &mut ByteReader<R>) -> Result<Self> {
        let n = r.u32()? as usize;
        if n == 0 {
            return Err(r.format_error("stage count is zero"));
        }
        let mut sizes = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let s = r.u32()?;
            if s == 0 {
                return Err(r.format_error("codebook size is zero"));
            }
            sizes.push(s);
        }
        let rows = r.u64()? as usize;
        let at = r.offset();
        let len = r.u64()? as usize;
        let row_bits: u64 = sizes.iter().map(|&s| index_bits(s) as u64).sum();
        if (row_bits * rows as u64).div_ceil(8) != len as u64 {
            return Err(crate::error::Error::Format {
                offset: at,
                message: format!("payload length {len} inconsistent with {rows} rows"),
            });
        }
        let payload = r.bytes(len)?;
        let at = r.offset();
        Self::from_payload(&sizes, rows, payload).map_err(|e| Error::Format {
            offset: at,
            message: e.to_string(),
        })
    }

    pub(crate) fn write_table_and_payload<W: Write>(&self, w: &mut W) -> Result<()> {
        put_u32(w, to_u32(self.stages(), "stage count")?)?;
        for &s in &self.stage_sizes {
            put_u32(w, s)?;
        }
        put_u64(w, self.rows as u64)?;
        put_u64(w, self.payload.len() as u64)?;
        w.write_all(&self.payload)?;
        Ok(())
    }
}

fn write_bits(buf: &mut [u8], mut pos: u64, mut value: u32, mut bits: u32) {
    while bits > 0 {
        let byte = (pos / 8) as usize;
        let shift = (pos % 8) as u32;
        let take = bits.min(8 - shift);
        let mask = ((1u32 << take) - 1) as u8;
        buf[byte] |= ((value as u8) & mask) << shift;
        value >>= take;
        bits -= take;
        pos += take as u64;
    }
}

fn read_bits(buf: &[u8], mut pos: u64, bits: u32) -> u32 {
    let mut out = 0u32;
    let mut done = 0;
    while done < bits {
        let byte = (pos / 8) as usize;
        let shift = (pos % 8) as u32;
        let take = (bits - done).min(8 - shift);
        let mask = ((1u32 << take) - 1) as u8;
        out |= (((buf[byte] >> shift) & mask) as u32) << done;
        done += take;
        pos += take as u64;
    }
    out
}
