//! `VECD` vector datasets: magic, version, D (u32), count (u64), then
//! `count x D` little-endian f32 values, row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{invalid_input, Result};
use crate::matrix::Matrix;
use crate::wire::{put_f32s, put_u32, put_u64, to_u32, ByteReader};

const DATASET_MAGIC: &[u8; 4] = b"VECD";
const DATASET_VERSION: u32 = 1;

/// A non-empty set of finite vectors sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorDataset {
    data: Matrix,
}

impl VectorDataset {
    pub fn new(data: Matrix) -> Result<Self> {
        if data.rows() == 0 || data.cols() == 0 {
            return Err(invalid_input(format!(
                "dataset must be non-empty, got {}x{}",
                data.rows(),
                data.cols()
            )));
        }
        if !data.is_finite() {
            return Err(invalid_input("dataset contains non-finite values"));
        }
        Ok(Self { data })
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn count(&self) -> usize {
        self.data.rows()
    }

    pub fn vectors(&self) -> &Matrix {
        &self.data
    }

    pub fn into_matrix(self) -> Matrix {
        self.data
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        put_u32(&mut w, DATASET_VERSION)?;
        put_u32(&mut w, to_u32(self.dim(), "dimension")?)?;
        put_u64(&mut w, self.count() as u64)?;
        put_f32s(&mut w, self.data.as_slice())?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut stream = DatasetStream::new(r)?;
        let mut data = Matrix::empty(stream.dim());
        while let Some(chunk) = stream.next_chunk(1 << 14)? {
            data.extend(&chunk)?;
        }
        stream.reader.expect_eof()?;
        Self::new(data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// Reads a `VECD` file chunk by chunk without holding it all in memory.
pub struct DatasetStream<R> {
    reader: ByteReader<R>,
    dim: usize,
    count: u64,
    read: u64,
}

impl DatasetStream<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(BufReader::new(File::open(path)?))
    }
}

impl<R: Read> DatasetStream<R> {
    pub fn new(inner: R) -> Result<Self> {
        let mut reader = ByteReader::new(inner);
        reader.magic(DATASET_MAGIC)?;
        let version = reader.u32()?;
        if version != DATASET_VERSION {
            return Err(reader.format_error(format!("unsupported dataset version {version}")));
        }
        let dim = reader.u32()? as usize;
        if dim == 0 {
            return Err(reader.format_error("dimension is zero"));
        }
        let count = reader.u64()?;
        if count == 0 {
            return Err(reader.format_error("dataset is empty"));
        }
        Ok(Self {
            reader,
            dim,
            count,
            read: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Up to `max_rows` further rows, or `None` once all rows were read.
    pub fn next_chunk(&mut self, max_rows: usize) -> Result<Option<Matrix>> {
        let left = self.count - self.read;
        if left == 0 {
            return Ok(None);
        }
        let n = left.min(max_rows.max(1) as u64) as usize;
        let values = self.reader.f32s(n * self.dim)?;
        self.read += n as u64;
        Ok(Some(Matrix::from_vec(n, self.dim, values)?))
    }
}
