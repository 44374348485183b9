//! Activation files, the seeded batch loader and the synthetic generator.
//!
//! File layout (little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "SAEACT01"
//! 8       4     version (u32, = 1)
//! 12      8     num_rows (u64)
//! 20      4     dim (u32)
//! 24      4     dtype (u32, 0 = f32)
//! 28      ...   num_rows * dim values, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, FormatError, Result};
use crate::linalg::{sq_norm, Matrix, Rng};
use crate::scalar::Scalar;

pub const ACTIVATION_MAGIC: &[u8; 8] = b"SAEACT01";
pub const ACTIVATION_VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;
pub const HEADER_LEN: u64 = 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActivationHeader {
    pub num_rows: u64,
    pub dim: u32,
    pub dtype: u32,
}

impl ActivationHeader {
    fn encode(&self) -> [u8; HEADER_LEN as usize] {
        let mut b = [0u8; HEADER_LEN as usize];
        b[..8].copy_from_slice(ACTIVATION_MAGIC);
        b[8..12].copy_from_slice(&ACTIVATION_VERSION.to_le_bytes());
        b[12..20].copy_from_slice(&self.num_rows.to_le_bytes());
        b[20..24].copy_from_slice(&self.dim.to_le_bytes());
        b[24..28].copy_from_slice(&self.dtype.to_le_bytes());
        b
    }

    fn decode(b: &[u8; HEADER_LEN as usize]) -> std::result::Result<Self, FormatError> {
        if &b[..8] != ACTIVATION_MAGIC {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(ACTIVATION_MAGIC).into(),
                found: String::from_utf8_lossy(&b[..8]).into(),
            });
        }
        let u32_at = |o: usize| u32::from_le_bytes([b[o], b[o + 1], b[o + 2], b[o + 3]]);
        let version = u32_at(8);
        if version != ACTIVATION_VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let mut n = [0u8; 8];
        n.copy_from_slice(&b[12..20]);
        let header = Self {
            num_rows: u64::from_le_bytes(n),
            dim: u32_at(20),
            dtype: u32_at(24),
        };
        if header.dtype != DTYPE_F32 {
            return Err(FormatError::UnsupportedDtype(header.dtype));
        }
        Ok(header)
    }

    pub fn payload_bytes(&self) -> u64 {
        self.num_rows * self.dim as u64 * 4
    }
}

/// Row-at-a-time writer; the row count is fixed up front.
pub struct ActivationWriter {
    out: BufWriter<File>,
    header: ActivationHeader,
    written: u64,
}

impl ActivationWriter {
    pub fn create(path: &Path, num_rows: u64, dim: usize) -> Result<Self> {
        let header = ActivationHeader {
            num_rows,
            dim: dim as u32,
            dtype: DTYPE_F32,
        };
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(&header.encode())?;
        Ok(Self {
            out,
            header,
            written: 0,
        })
    }

    pub fn write_row<T: Scalar>(&mut self, row: &[T]) -> Result<()> {
        if row.len() != self.header.dim as usize {
            return Err(crate::error::shape_err(
                "write_row",
                self.header.dim,
                row.len(),
            ));
        }
        if self.written == self.header.num_rows {
            return Err(Error::Domain("more rows than declared in header".into()));
        }
        for v in row {
            self.out.write_all(&(v.wide() as f32).to_le_bytes())?;
        }
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if self.written != self.header.num_rows {
            return Err(Error::Domain(format!(
                "wrote {} rows, header declares {}",
                self.written, self.header.num_rows
            )));
        }
        self.out.flush()?;
        Ok(())
    }
}

pub fn write_activations<T: Scalar>(rows: &Matrix<T>, path: &Path) -> Result<()> {
    let mut w = ActivationWriter::create(path, rows.rows() as u64, rows.cols())?;
    for r in rows.iter_rows() {
        w.write_row(r)?;
    }
    w.finish()
}

/// Streaming reader. The header and the file length are validated on open.
pub struct ActivationReader {
    input: BufReader<File>,
    header: ActivationHeader,
    read: u64,
    buf: Vec<u8>,
}

impl ActivationReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let len = file.metadata()?.len();
        let mut input = BufReader::new(file);
        let mut hb = [0u8; HEADER_LEN as usize];
        if len < HEADER_LEN {
            return Err(FormatError::Truncated {
                expected: HEADER_LEN,
                found: len,
            }
            .into());
        }
        input.read_exact(&mut hb)?;
        let header = ActivationHeader::decode(&hb)?;
        let expected = HEADER_LEN + header.payload_bytes();
        if len > expected {
            return Err(FormatError::ShapeMismatch(format!(
                "{} rows of dim {} need {expected} bytes, file has {len}",
                header.num_rows, header.dim
            ))
            .into());
        }
        if len < expected {
            return Err(FormatError::Truncated {
                expected,
                found: len,
            }
            .into());
        }
        Ok(Self {
            input,
            header,
            read: 0,
            buf: vec![0u8; header.dim as usize * 4],
        })
    }

    pub fn header(&self) -> ActivationHeader {
        self.header
    }

    pub fn num_rows(&self) -> usize {
        self.header.num_rows as usize
    }

    pub fn dim(&self) -> usize {
        self.header.dim as usize
    }

    /// Reads the next row into `out`; `Ok(false)` at end of file.
    pub fn next_row_into<T: Scalar>(&mut self, out: &mut [T]) -> Result<bool> {
        if self.read == self.header.num_rows {
            return Ok(false);
        }
        self.input.read_exact(&mut self.buf)?;
        for (o, b) in out.iter_mut().zip(self.buf.chunks_exact(4)) {
            *o = T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
        }
        self.read += 1;
        Ok(true)
    }

    /// Up to `n` further rows, or `None` at end of file.
    pub fn read_chunk<T: Scalar>(&mut self, n: usize) -> Result<Option<Matrix<T>>> {
        let left = (self.header.num_rows - self.read) as usize;
        let take = n.min(left);
        if take == 0 {
            return Ok(None);
        }
        let d = self.dim();
        let mut m = Matrix::zeros(take, d);
        for r in 0..take {
            self.next_row_into(m.row_mut(r))?;
        }
        Ok(Some(m))
    }
}

/// Reads a whole file into memory.
pub fn read_activations<T: Scalar>(path: &Path) -> Result<Matrix<T>> {
    let mut r = ActivationReader::open(path)?;
    let n = r.num_rows();
    Ok(r.read_chunk(n)?
        .unwrap_or_else(|| Matrix::zeros(0, r.dim())))
}

/// Short hex digest over the row values as little-endian `f32`.
pub fn data_digest<T: Scalar>(m: &Matrix<T>) -> String {
    let mut h = Sha256::new();
    h.update((m.rows() as u64).to_le_bytes());
    h.update((m.cols() as u32).to_le_bytes());
    for v in m.as_slice() {
        h.update((v.wide() as f32).to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

/// [`data_digest`] of a file's contents, streamed in chunks.
pub fn file_digest(path: &Path) -> Result<String> {
    let mut r = ActivationReader::open(path)?;
    let mut h = Sha256::new();
    h.update((r.num_rows() as u64).to_le_bytes());
    h.update((r.dim() as u32).to_le_bytes());
    while let Some(chunk) = r.read_chunk::<f32>(4096)? {
        for v in chunk.as_slice() {
            h.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(&h.finalize()[..8]))
}

/// Ground-truth sparse dictionary data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// number of true atoms
    pub atoms: usize,
    pub dim: usize,
    /// atoms per row
    pub active: usize,
    pub coef_mean: f64,
    pub coef_std: f64,
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Coefficients `|N(1, 0.5^2)|`.
    pub fn new(atoms: usize, dim: usize, active: usize, noise: f64, seed: u64) -> Self {
        Self {
            atoms,
            dim,
            active,
            coef_mean: 1.0,
            coef_std: 0.5,
            noise,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 1 || self.atoms < 1 {
            return Err(Error::Config("atoms and dim must be >= 1".into()));
        }
        if self.active < 1 || self.active > self.atoms {
            return Err(Error::Config(format!(
                "active must be in [1, atoms = {}], got {}",
                self.atoms, self.active
            )));
        }
        if self.noise.is_nan() || self.noise < 0.0 || self.coef_std.is_nan() || self.coef_std < 0.0
        {
            return Err(Error::Config(
                "noise and coefficient std must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Draws rows as sums of `active` distinct unit atoms with `|N(mean, std^2)|`
/// coefficients plus isotropic Gaussian noise.
pub struct SyntheticGenerator {
    spec: SyntheticSpec,
    atoms: Matrix<f64>,
    rng: Rng,
    scratch: Vec<usize>,
}

impl SyntheticGenerator {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::new(spec.seed);
        let mut atoms = rng.normal_matrix::<f64>(spec.atoms, spec.dim);
        for i in 0..spec.atoms {
            let row = atoms.row_mut(i);
            let n = sq_norm(row).sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(Self {
            spec,
            atoms,
            rng,
            scratch: Vec::new(),
        })
    }

    pub fn atoms(&self) -> &Matrix<f64> {
        &self.atoms
    }

    pub fn next_row<T: Scalar>(&mut self, out: &mut [T]) {
        let s = &self.spec;
        let mut acc = vec![0.0f64; s.dim];
        let chosen = self.rng.distinct(s.atoms, s.active, &mut self.scratch);
        for a in chosen {
            let c = (s.coef_mean + s.coef_std * self.rng.normal()).abs();
            for (x, &e) in acc.iter_mut().zip(self.atoms.row(a)) {
                *x += c * e;
            }
        }
        if s.noise > 0.0 {
            for x in acc.iter_mut() {
                *x += s.noise * self.rng.normal();
            }
        }
        for (o, x) in out.iter_mut().zip(acc) {
            *o = T::of(x);
        }
    }
}

pub fn generate_synthetic<T: Scalar>(spec: &SyntheticSpec, rows: usize) -> Result<Matrix<T>> {
    if rows < 1 {
        return Err(Error::Domain("n_rows must be >= 1".into()));
    }
    let mut g = SyntheticGenerator::new(spec.clone())?;
    let mut m = Matrix::zeros(rows, spec.dim);
    for r in 0..rows {
        g.next_row(m.row_mut(r));
    }
    Ok(m)
}

/// Streams a synthetic dataset straight to an activation file.
pub fn generate_synthetic_file(spec: &SyntheticSpec, rows: usize, path: &Path) -> Result<()> {
    if rows < 1 {
        return Err(Error::Domain("n_rows must be >= 1".into()));
    }
    let mut g = SyntheticGenerator::new(spec.clone())?;
    let mut w = ActivationWriter::create(path, rows as u64, spec.dim)?;
    let mut row = vec![0.0f32; spec.dim];
    for _ in 0..rows {
        g.next_row(&mut row);
        w.write_row(&row)?;
    }
    w.finish()
}

/// One shuffled batch.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub epoch: usize,
    pub rows: Vec<usize>,
    pub data: Matrix<T>,
}

/// Seeded shuffled batches over a row range; the final partial batch of each
/// epoch is dropped.
pub struct BatchIter<'a, T> {
    data: &'a Matrix<T>,
    offset: usize,
    batch_size: usize,
    epochs: usize,
    rng: Rng,
    epoch: usize,
    perm: Vec<usize>,
    cursor: usize,
}

impl<'a, T: Scalar> BatchIter<'a, T> {
    /// Batches over rows `[offset, data.rows())`.
    pub fn over_range(
        data: &'a Matrix<T>,
        offset: usize,
        batch_size: usize,
        seed: u64,
        epochs: usize,
    ) -> Result<Self> {
        let n = data.rows().saturating_sub(offset);
        if batch_size < 1 || batch_size > n {
            return Err(Error::Domain(format!(
                "batch size {batch_size} must be in [1, {n}]"
            )));
        }
        let dropped = n % batch_size;
        if dropped > 0 {
            log::info!("dropping {dropped} rows per epoch (partial final batch)");
        }
        Ok(Self {
            data,
            offset,
            batch_size,
            epochs,
            rng: Rng::new(seed),
            epoch: 0,
            perm: Vec::new(),
            cursor: usize::MAX,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        (self.data.rows() - self.offset) / self.batch_size
    }
}

impl<T: Scalar> Iterator for BatchIter<'_, T> {
    type Item = Batch<T>;

    fn next(&mut self) -> Option<Batch<T>> {
        if self.cursor == usize::MAX || self.cursor + self.batch_size > self.perm.len() {
            if self.cursor != usize::MAX {
                self.epoch += 1;
            }
            if self.epoch >= self.epochs {
                return None;
            }
            self.perm = (self.offset..self.data.rows()).collect();
            let mut epoch_rng = self.rng.fork(self.epoch as u64);
            epoch_rng.shuffle(&mut self.perm);
            self.cursor = 0;
        }
        let rows = self.perm[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        Some(Batch {
            epoch: self.epoch,
            data: self.data.select_rows(&rows),
            rows,
        })
    }
}

pub fn batch_iter<T: Scalar>(
    data: &Matrix<T>,
    batch_size: usize,
    seed: u64,
    epochs: usize,
) -> Result<BatchIter<'_, T>> {
    BatchIter::over_range(data, 0, batch_size, seed, epochs)
}
