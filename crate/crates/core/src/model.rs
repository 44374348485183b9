//! The sparse autoencoder: parameters, encoder/decoder passes and the
//! checkpoint file.
//!
//! The decoder is stored as `D` rows of length `h`; row `i` is the embedding
//! `e_i` that latent `i` scales in the reconstruction.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::codes::SparseCode;
use crate::error::{shape_err, FormatError, Result};
use crate::linalg::{axpy, dot, sq_norm, Matrix, Rng};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams<T> {
    /// `D x h`
    pub w_enc: Matrix<T>,
    pub b_enc: Vec<T>,
    /// `D x h`, row `i` = embedding `e_i`
    pub w_dec: Matrix<T>,
    pub b_dec: Vec<T>,
}

impl<T: Scalar> SaeParams<T> {
    /// Tied initialization: Gaussian decoder rows normalized to unit length,
    /// encoder rows equal to decoder rows, zero biases.
    pub fn init(dict_size: usize, hidden: usize, rng: &mut Rng) -> Self {
        assert!(dict_size >= 1 && hidden >= 1, "D and h must be positive");
        let mut w_dec = rng.normal_matrix::<f64>(dict_size, hidden);
        for i in 0..dict_size {
            let row = w_dec.row_mut(i);
            let n = sq_norm(row).sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        let w_dec = w_dec.cast::<T>();
        Self {
            w_enc: w_dec.clone(),
            b_enc: vec![T::zero(); dict_size],
            w_dec,
            b_dec: vec![T::zero(); hidden],
        }
    }

    pub fn zeros(dict_size: usize, hidden: usize) -> Self {
        Self {
            w_enc: Matrix::zeros(dict_size, hidden),
            b_enc: vec![T::zero(); dict_size],
            w_dec: Matrix::zeros(dict_size, hidden),
            b_dec: vec![T::zero(); hidden],
        }
    }

    #[inline]
    pub fn dict_size(&self) -> usize {
        self.w_enc.rows()
    }

    #[inline]
    pub fn hidden(&self) -> usize {
        self.w_enc.cols()
    }

    pub fn is_finite(&self) -> bool {
        self.w_enc.is_finite()
            && self.w_dec.is_finite()
            && self.b_enc.iter().all(|v| v.is_finite())
            && self.b_dec.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> SaeParams<U> {
        SaeParams {
            w_enc: self.w_enc.cast(),
            b_enc: self.b_enc.iter().map(|v| U::of(v.wide())).collect(),
            w_dec: self.w_dec.cast(),
            b_dec: self.b_dec.iter().map(|v| U::of(v.wide())).collect(),
        }
    }

    fn check_input(&self, op: &'static str, len: usize) -> Result<()> {
        if len != self.hidden() {
            return Err(shape_err(op, self.hidden(), len));
        }
        Ok(())
    }

    /// Pre-activations `W_enc x + b_enc`.
    pub fn encode(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_input("encode", x.len())?;
        let mut out = vec![T::zero(); self.dict_size()];
        self.encode_into(x, &mut out);
        Ok(out)
    }

    #[inline]
    pub(crate) fn encode_into(&self, x: &[T], out: &mut [T]) {
        for ((o, w), &b) in out.iter_mut().zip(self.w_enc.iter_rows()).zip(&self.b_enc) {
            *o = dot(w, x) + b;
        }
    }

    /// Pre-activations for every row of `x`, rows computed in parallel.
    pub fn encode_batch(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_input("encode_batch", x.cols())?;
        let d = self.dict_size();
        let mut out = Matrix::zeros(x.rows(), d);
        out.as_mut_slice()
            .par_chunks_mut(d.max(1))
            .enumerate()
            .for_each(|(r, o)| self.encode_into(x.row(r), o));
        Ok(out)
    }

    /// Reconstruction from the first `min(j, len)` entries of `code`.
    pub fn decode_prefix(&self, code: &SparseCode<T>, j: usize) -> Vec<T> {
        let mut out = self.b_dec.clone();
        for (i, v) in code.iter().take(j) {
            axpy(v, self.w_dec.row(i), &mut out);
        }
        out
    }

    pub fn decode(&self, code: &SparseCode<T>) -> Vec<T> {
        self.decode_prefix(code, code.len())
    }

    pub fn decode_batch(&self, codes: &[SparseCode<T>]) -> Matrix<T> {
        let h = self.hidden();
        let mut out = Matrix::zeros(codes.len(), h);
        for (r, c) in codes.iter().enumerate() {
            out.row_mut(r).copy_from_slice(&self.decode(c));
        }
        out
    }

    /// Short hex digest of the parameter bytes (as little-endian `f32`).
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for t in self.tensors() {
            for v in t {
                h.update((v.wide() as f32).to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }

    /// Tensors in checkpoint order.
    pub fn tensors(&self) -> [&[T]; 4] {
        [
            self.w_enc.as_slice(),
            &self.b_enc,
            self.w_dec.as_slice(),
            &self.b_dec,
        ]
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SAECKPT1";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Descriptive record stored in a checkpoint next to the tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointMeta {
    pub dict_size: usize,
    pub hidden: usize,
    pub k: usize,
    pub activation: String,
    pub schedule: String,
    pub config_digest: String,
    pub step: u64,
    pub seed: u64,
}

impl CheckpointMeta {
    fn to_text(&self) -> String {
        format!(
            "dict_size={}\nhidden={}\nk={}\nactivation={}\nschedule={}\nconfig_digest={}\nstep={}\nseed={}\n",
            self.dict_size,
            self.hidden,
            self.k,
            self.activation,
            self.schedule,
            self.config_digest,
            self.step,
            self.seed
        )
    }

    fn from_text(text: &str) -> std::result::Result<Self, FormatError> {
        let mut meta = CheckpointMeta::default();
        let bad = |m: String| FormatError::Metadata(m);
        let num = |k: &str, v: &str| {
            v.parse::<u64>()
                .map_err(|e| FormatError::Metadata(format!("{k}: {e}")))
        };
        let mut seen = 0u8;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line without '=': {line:?}")))?;
            match k {
                "dict_size" => {
                    meta.dict_size = num(k, v)? as usize;
                    seen |= 1;
                }
                "hidden" => {
                    meta.hidden = num(k, v)? as usize;
                    seen |= 2;
                }
                "k" => meta.k = num(k, v)? as usize,
                "activation" => meta.activation = v.to_string(),
                "schedule" => meta.schedule = v.to_string(),
                "config_digest" => meta.config_digest = v.to_string(),
                "step" => meta.step = num(k, v)?,
                "seed" => meta.seed = num(k, v)?,
                // unknown keys are carried by newer writers; ignore them
                _ => {}
            }
        }
        if seen != 3 {
            return Err(bad("dict_size and hidden are required".into()));
        }
        Ok(meta)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub params: SaeParams<T>,
}

fn expected_floats(d: usize, h: usize) -> u64 {
    (2 * d * h + d + h) as u64
}

/// Writes `magic | version:u8 | meta_len:u32 | meta utf-8 | payload_len:u64 |
/// W_enc | b_enc | W_dec | b_dec`, all little-endian, tensors as `f32`.
pub fn save<T: Scalar>(params: &SaeParams<T>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let mut meta = meta.clone();
    meta.dict_size = params.dict_size();
    meta.hidden = params.hidden();
    let text = meta.to_text();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&[CHECKPOINT_VERSION])?;
    w.write_all(&(text.len() as u32).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    let payload = expected_floats(meta.dict_size, meta.hidden) * 4;
    w.write_all(&payload.to_le_bytes())?;
    for t in params.tensors() {
        for v in t {
            w.write_all(&(v.wide() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or_truncated(r: &mut impl Read, buf: &mut [u8], consumed: &mut u64) -> Result<()> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..])? {
            0 => {
                return Err(FormatError::Truncated {
                    expected: *consumed + buf.len() as u64,
                    found: *consumed + got as u64,
                }
                .into())
            }
            n => got += n,
        }
    }
    *consumed += buf.len() as u64;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut at = 0u64;
    let mut magic = [0u8; 8];
    read_exact_or_truncated(&mut r, &mut magic, &mut at)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into(),
            found: String::from_utf8_lossy(&magic).into(),
        }
        .into());
    }
    let mut version = [0u8; 1];
    read_exact_or_truncated(&mut r, &mut version, &mut at)?;
    if version[0] != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion(version[0] as u32).into());
    }
    let mut len4 = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut len4, &mut at)?;
    let mut text = vec![0u8; u32::from_le_bytes(len4) as usize];
    read_exact_or_truncated(&mut r, &mut text, &mut at)?;
    let text = String::from_utf8(text).map_err(|e| FormatError::Metadata(e.to_string()))?;
    let meta = CheckpointMeta::from_text(&text)?;

    let mut len8 = [0u8; 8];
    read_exact_or_truncated(&mut r, &mut len8, &mut at)?;
    let declared = u64::from_le_bytes(len8);
    let (d, h) = (meta.dict_size, meta.hidden);
    if declared != expected_floats(d, h) * 4 {
        return Err(FormatError::ShapeMismatch(format!(
            "payload of {declared} bytes does not hold D={d}, h={h}"
        ))
        .into());
    }
    let mut payload = vec![0u8; declared as usize];
    read_exact_or_truncated(&mut r, &mut payload, &mut at)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(FormatError::ShapeMismatch("trailing bytes after payload".into()).into());
    }

    let mut floats = payload
        .chunks_exact(4)
        .map(|b| T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64));
    let mut take = |n: usize| floats.by_ref().take(n).collect::<Vec<T>>();
    let params = SaeParams {
        w_enc: Matrix::from_vec(d, h, take(d * h))?,
        b_enc: take(d),
        w_dec: Matrix::from_vec(d, h, take(d * h))?,
        b_dec: take(h),
    };
    Ok(Checkpoint { meta, params })
}
