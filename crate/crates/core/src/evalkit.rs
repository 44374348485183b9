//! Measurement: FVU and l0, inference-time k sweeps, almost-dead counts,
//! decoder cosine profiles, activation distributions and TopK-vs-JumpReLU
//! comparisons, plus the report file and CSV export.
//!
//! Variance of a batch of vectors is the per-coordinate population variance
//! over the batch, summed over coordinates. `FVU = Var(x - x_hat) / Var(x)`
//! and explained variance is `1 - FVU`.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codes::{
    apply_jumprelu, batch_ranked, calibrate_jumprelu_many, topk_select, JumpReluThreshold,
    SparseCode,
};
use crate::error::{shape_err, Error, Result};
use crate::linalg::{axpy, dot, sq_norm, Matrix};
use crate::model::SaeParams;
use crate::scalar::Scalar;
use crate::train::FreqTracker;

/// Fraction of unexplained variance between a batch and its reconstruction.
pub fn fvu<T: Scalar>(targets: &Matrix<T>, recons: &Matrix<T>) -> Result<f64> {
    if targets.rows() != recons.rows() || targets.cols() != recons.cols() {
        return Err(shape_err(
            "fvu",
            format!("{}x{}", targets.rows(), targets.cols()),
            format!("{}x{}", recons.rows(), recons.cols()),
        ));
    }
    let (b, h) = (targets.rows(), targets.cols());
    if b < 2 {
        return Err(Error::Domain("fvu needs at least two rows".into()));
    }
    let mut mean_x = vec![0.0f64; h];
    let mut mean_r = vec![0.0f64; h];
    for (x, y) in targets.iter_rows().zip(recons.iter_rows()) {
        for t in 0..h {
            mean_x[t] += x[t].wide();
            mean_r[t] += x[t].wide() - y[t].wide();
        }
    }
    mean_x
        .iter_mut()
        .chain(mean_r.iter_mut())
        .for_each(|m| *m /= b as f64);
    let (mut var_x, mut var_r) = (0.0f64, 0.0f64);
    for (x, y) in targets.iter_rows().zip(recons.iter_rows()) {
        for t in 0..h {
            let dx = x[t].wide() - mean_x[t];
            let dr = x[t].wide() - y[t].wide() - mean_r[t];
            var_x += dx * dx;
            var_r += dr * dr;
        }
    }
    if var_x == 0.0 {
        return Err(Error::Domain("targets have zero variance".into()));
    }
    Ok(var_r / var_x)
}

/// Streaming FVU over row pairs, shifted by the first target row for
/// numerical stability.
#[derive(Debug, Clone)]
pub struct FvuAccumulator {
    n: u64,
    shift: Vec<f64>,
    sum_x: Vec<f64>,
    sq_x: Vec<f64>,
    sum_r: Vec<f64>,
    sq_r: Vec<f64>,
}

impl FvuAccumulator {
    pub fn new(h: usize) -> Self {
        Self {
            n: 0,
            shift: Vec::new(),
            sum_x: vec![0.0; h],
            sq_x: vec![0.0; h],
            sum_r: vec![0.0; h],
            sq_r: vec![0.0; h],
        }
    }

    pub fn add<T: Scalar>(&mut self, target: &[T], recon: &[T]) {
        if self.shift.is_empty() {
            self.shift = target.iter().map(|v| v.wide()).collect();
        }
        for t in 0..target.len() {
            let x = target[t].wide();
            let dx = x - self.shift[t];
            let r = x - recon[t].wide();
            self.sum_x[t] += dx;
            self.sq_x[t] += dx * dx;
            self.sum_r[t] += r;
            self.sq_r[t] += r * r;
        }
        self.n += 1;
    }

    pub fn fvu(&self) -> Result<f64> {
        if self.n < 2 {
            return Err(Error::Domain("fvu needs at least two rows".into()));
        }
        let n = self.n as f64;
        let var = |s: &[f64], q: &[f64]| -> f64 {
            s.iter().zip(q).map(|(s, q)| (q - s * s / n) / n).sum()
        };
        let vx = var(&self.sum_x, &self.sq_x);
        if vx <= 0.0 {
            return Err(Error::Domain("targets have zero variance".into()));
        }
        Ok(var(&self.sum_r, &self.sq_r).max(0.0) / vx)
    }
}

/// Mean number of active latents per sample.
pub fn l0<T: Scalar>(codes: &[SparseCode<T>]) -> f64 {
    if codes.is_empty() {
        return 0.0;
    }
    codes.iter().map(|c| c.len()).sum::<usize>() as f64 / codes.len() as f64
}

/// Features whose frequency is strictly below `threshold`.
pub fn almost_dead_count(frequencies: &[f64], threshold: f64) -> usize {
    frequencies.iter().filter(|&&f| f < threshold).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceMode {
    TopK,
    BatchTopK,
    JumpRelu,
}

impl fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InferenceMode::TopK => "topk",
            InferenceMode::BatchTopK => "batchtopk",
            InferenceMode::JumpRelu => "jumprelu",
        })
    }
}

impl FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "topk" | "hierarchical" => Ok(InferenceMode::TopK),
            "batchtopk" => Ok(InferenceMode::BatchTopK),
            "jumprelu" => Ok(InferenceMode::JumpRelu),
            other => Err(Error::Config(format!("unknown inference mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub dead_threshold: f64,
    pub dead_window: u64,
    /// rows encoded at once; also the batch used by BatchTopK inference
    pub chunk_rows: usize,
    /// leading rows pooled to calibrate JumpReLU thresholds
    pub calibration_rows: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            dead_threshold: 1e-5,
            dead_window: 100_000,
            chunk_rows: 4096,
            calibration_rows: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub mode: InferenceMode,
    pub k: usize,
    pub l0: f64,
    pub fvu: f64,
    pub explained_variance: f64,
    pub live: usize,
    pub almost_dead: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub threshold: Option<f64>,
}

/// Parses `start:stop:step` (inclusive) or a comma list.
pub fn parse_k_grid(s: &str) -> Result<Vec<usize>> {
    let bad = |m: String| Error::Config(format!("bad k grid {s:?}: {m}"));
    let num = |t: &str| t.trim().parse::<usize>().map_err(|e| bad(e.to_string()));
    let mut grid = if s.contains(':') {
        let parts: Vec<&str> = s.split(':').collect();
        let (start, stop, step) = match parts.as_slice() {
            [a, b] => (num(a)?, num(b)?, 1),
            [a, b, c] => (num(a)?, num(b)?, num(c)?),
            _ => return Err(bad("expected start:stop[:step]".into())),
        };
        if step == 0 || start > stop {
            return Err(bad("need start <= stop and step >= 1".into()));
        }
        (start..=stop).step_by(step).collect()
    } else {
        s.split(',').map(num).collect::<Result<Vec<_>>>()?
    };
    grid.sort_unstable();
    grid.dedup();
    if grid.first() == Some(&0) || grid.is_empty() {
        return Err(bad("levels must be >= 1".into()));
    }
    Ok(grid)
}

/// Per-sample candidate code plus its active length at every grid level.
/// Codes for successive levels are nested prefixes in all three modes.
struct NestedCodes<T> {
    codes: Vec<SparseCode<T>>,
    /// `lengths[s][g]` = active entries of sample `s` at grid position `g`
    lengths: Vec<Vec<usize>>,
}

fn nested_codes<T: Scalar>(
    pre: &Matrix<T>,
    grid: &[usize],
    mode: InferenceMode,
    thresholds: &[JumpReluThreshold],
) -> Result<NestedCodes<T>> {
    let kmax = *grid.last().unwrap();
    let b = pre.rows();
    match mode {
        InferenceMode::TopK => {
            let codes = pre
                .iter_rows()
                .map(|r| topk_select(r, kmax))
                .collect::<Result<Vec<_>>>()?;
            let lengths = codes
                .iter()
                .map(|c| grid.iter().map(|&k| k.min(c.len())).collect())
                .collect();
            Ok(NestedCodes { codes, lengths })
        }
        InferenceMode::JumpRelu => {
            let lowest = thresholds
                .iter()
                .map(|t| t.theta)
                .fold(f64::INFINITY, f64::min);
            let codes: Vec<SparseCode<T>> = pre
                .iter_rows()
                .map(|r| apply_jumprelu(r, JumpReluThreshold { theta: lowest }))
                .collect();
            let lengths = codes
                .iter()
                .map(|c| {
                    thresholds
                        .iter()
                        .map(|t| c.values.partition_point(|v| v.wide() > t.theta))
                        .collect()
                })
                .collect();
            Ok(NestedCodes { codes, lengths })
        }
        InferenceMode::BatchTopK => {
            let ranked = batch_ranked(pre, b * kmax);
            let mut codes = vec![SparseCode::empty(); b];
            let mut ranks: Vec<Vec<usize>> = vec![Vec::new(); b];
            for (r, e) in ranked.iter().enumerate() {
                let s = e.sample as usize;
                codes[s].indices.push(e.index);
                codes[s].values.push(e.value);
                ranks[s].push(r);
            }
            let lengths = ranks
                .iter()
                .map(|rk| {
                    grid.iter()
                        .map(|&k| rk.partition_point(|&r| r < b * k))
                        .collect()
                })
                .collect();
            Ok(NestedCodes { codes, lengths })
        }
    }
}

/// Evaluates `params` on `data` at every `k` of the grid with one selector.
///
/// TopK truncates each sample's sorted code; BatchTopK keeps the `B k`
/// largest latents of each chunk of `chunk_rows` rows; JumpReLU applies a
/// constant threshold calibrated on the first `calibration_rows` rows so that
/// the expected active count is `k`. Reconstructions use the full selected
/// code; almost-dead counts use a windowed frequency tracker over `data`.
pub fn sweep<T: Scalar>(
    params: &SaeParams<T>,
    data: &Matrix<T>,
    k_grid: &[usize],
    mode: InferenceMode,
    opts: &EvalOptions,
) -> Result<Vec<SweepEntry>> {
    let d = params.dict_size();
    let h = params.hidden();
    if data.cols() != h {
        return Err(shape_err("sweep", h, data.cols()));
    }
    let mut grid = k_grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    if grid.is_empty() || grid[0] < 1 || *grid.last().unwrap() > d {
        return Err(Error::Domain(format!("k grid must lie within [1, {d}]")));
    }
    let chunk = opts.chunk_rows.max(1);

    let thresholds = if mode == InferenceMode::JumpRelu {
        let calib = data.slice_rows(0, data.rows().min(opts.calibration_rows.max(1)));
        let pre = params.encode_batch(&calib)?;
        calibrate_jumprelu_many(pre.iter_rows(), &grid)?
    } else {
        Vec::new()
    };

    let mut acc: Vec<FvuAccumulator> = grid.iter().map(|_| FvuAccumulator::new(h)).collect();
    let mut freq: Vec<FreqTracker> = grid
        .iter()
        .map(|_| FreqTracker::new(d, opts.dead_window))
        .collect();
    let mut active = vec![0usize; grid.len()];
    let mut recon = vec![T::zero(); h];

    let mut start = 0;
    while start < data.rows() {
        let end = (start + chunk).min(data.rows());
        let rows = data.slice_rows(start, end);
        let pre = params.encode_batch(&rows)?;
        let nested = nested_codes(&pre, &grid, mode, &thresholds)?;
        for (s, code) in nested.codes.iter().enumerate() {
            let x = rows.row(s);
            recon.copy_from_slice(&params.b_dec);
            let mut pos = 0;
            for (g, &len) in nested.lengths[s].iter().enumerate() {
                while pos < len {
                    axpy(
                        code.values[pos],
                        params.w_dec.row(code.indices[pos] as usize),
                        &mut recon,
                    );
                    pos += 1;
                }
                acc[g].add(x, &recon);
                freq[g].track_indices(&code.indices[..len]);
                active[g] += len;
            }
        }
        start = end;
    }

    let n = data.rows() as f64;
    grid.iter()
        .enumerate()
        .map(|(g, &k)| {
            let fvu = acc[g].fvu()?;
            let dead = almost_dead_count(&freq[g].frequencies(), opts.dead_threshold);
            Ok(SweepEntry {
                mode,
                k,
                l0: active[g] as f64 / n,
                fvu,
                explained_variance: 1.0 - fvu,
                live: d - dead,
                almost_dead: dead,
                threshold: thresholds.get(g).map(|t| t.theta),
            })
        })
        .collect()
}

/// Which embedding each ranked embedding is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CosineReference {
    /// the sample's top-1 embedding
    Top1,
    /// the embedding one rank above
    Adjacent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineProfile {
    pub reference: CosineReference,
    /// mean cosine similarity at rank `i + 1`; `None` when no sample had that
    /// many active latents
    pub mean: Vec<Option<f64>>,
    pub samples: Vec<usize>,
}

fn cosine<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let na = sq_norm(a).wide().sqrt();
    let nb = sq_norm(b).wide().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b).wide() / (na * nb)).clamp(-1.0, 1.0)
}

/// Mean cosine similarity between the embedding at each activation rank and
/// a reference embedding, over per-token TopK codes at `k`.
pub fn cosine_profile<T: Scalar>(
    params: &SaeParams<T>,
    data: &Matrix<T>,
    k: usize,
    reference: CosineReference,
) -> Result<CosineProfile> {
    let mut sums = vec![0.0f64; k];
    let mut counts = vec![0usize; k];
    let pre = params.encode_batch(data)?;
    for row in pre.iter_rows() {
        let c = topk_select(row, k)?;
        for i in 0..c.len() {
            let other = match reference {
                CosineReference::Top1 => c.indices[0],
                CosineReference::Adjacent => c.indices[i.saturating_sub(1)],
            };
            sums[i] += cosine(
                params.w_dec.row(c.indices[i] as usize),
                params.w_dec.row(other as usize),
            );
            counts[i] += 1;
        }
    }
    Ok(CosineProfile {
        reference,
        mean: sums
            .iter()
            .zip(&counts)
            .map(|(&s, &n)| (n > 0).then(|| s / n as f64))
            .collect(),
        samples: counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `counts.len() + 1` bin edges; the first bin also takes values below
    /// `edges[0]` and the last takes values at or above the final edge
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// `bins` log-spaced bins over `[lo, hi]`.
    pub fn log_spaced(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let (llo, lhi) = (lo.log10(), hi.log10());
        let edges: Vec<f64> = (0..=bins)
            .map(|b| 10f64.powf(llo + (lhi - llo) * b as f64 / bins as f64))
            .collect();
        let mut counts = vec![0usize; bins];
        for &v in values {
            let b = if v <= 0.0 || lhi == llo {
                0
            } else {
                let pos = (v.log10() - llo) / (lhi - llo) * bins as f64;
                (pos.floor().max(0.0) as usize).min(bins - 1)
            };
            counts[b] += 1;
        }
        Self { edges, counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

pub const HISTOGRAM_BINS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationDistributions {
    pub frequency: Vec<f64>,
    /// `None` for features that never fired
    pub mean_squared: Vec<Option<f64>>,
    /// 64 log-spaced bins over `[1e-7, 1]`
    pub frequency_hist: Histogram,
    /// 64 log-spaced bins spanning the observed range of active features
    pub mean_squared_hist: Histogram,
}

/// Per-feature firing frequency and mean squared activation over the tokens
/// on which the feature fired, under per-token TopK at `k`.
pub fn activation_distributions<T: Scalar>(
    params: &SaeParams<T>,
    data: &Matrix<T>,
    k: usize,
) -> Result<ActivationDistributions> {
    let d = params.dict_size();
    let mut counts = vec![0u64; d];
    let mut sq = vec![0.0f64; d];
    let pre = params.encode_batch(data)?;
    for row in pre.iter_rows() {
        for (i, v) in topk_select(row, k)?.iter() {
            counts[i] += 1;
            sq[i] += v.wide() * v.wide();
        }
    }
    let n = data.rows().max(1) as f64;
    let frequency: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let mean_squared: Vec<Option<f64>> = counts
        .iter()
        .zip(&sq)
        .map(|(&c, &s)| (c > 0).then(|| s / c as f64))
        .collect();
    let participating: Vec<f64> = mean_squared.iter().flatten().copied().collect();
    let positive = participating.iter().copied().filter(|&v| v > 0.0);
    let lo = positive.clone().fold(f64::INFINITY, f64::min);
    let hi = positive.fold(0.0, f64::max);
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (1.0, 1.0) };
    Ok(ActivationDistributions {
        frequency_hist: Histogram::log_spaced(&frequency, 1e-7, 1.0, HISTOGRAM_BINS),
        mean_squared_hist: Histogram::log_spaced(&participating, lo, hi, HISTOGRAM_BINS),
        frequency,
        mean_squared,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeComparison {
    pub k: usize,
    pub first: SweepEntry,
    pub second: SweepEntry,
    /// `second.fvu - first.fvu`
    pub fvu_difference: f64,
}

/// FVU of two selectors at the same `k` on the same data.
pub fn compare_modes<T: Scalar>(
    params: &SaeParams<T>,
    data: &Matrix<T>,
    k: usize,
    first: InferenceMode,
    second: InferenceMode,
    opts: &EvalOptions,
) -> Result<ModeComparison> {
    let a = sweep(params, data, &[k], first, opts)?.remove(0);
    let b = sweep(params, data, &[k], second, opts)?.remove(0);
    Ok(ModeComparison {
        k,
        fvu_difference: b.fvu - a.fvu,
        first: a,
        second: b,
    })
}

/// Per-token TopK versus calibrated constant-threshold JumpReLU at matched
/// expected l0.
pub fn compare_inference_modes<T: Scalar>(
    params: &SaeParams<T>,
    data: &Matrix<T>,
    k: usize,
    opts: &EvalOptions,
) -> Result<ModeComparison> {
    compare_modes(
        params,
        data,
        k,
        InferenceMode::TopK,
        InferenceMode::JumpRelu,
        opts,
    )
}

/// Everything measured for one model on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub model_digest: String,
    pub data_digest: String,
    pub rows: usize,
    pub dead_threshold: f64,
    pub dead_window: u64,
    pub entries: Vec<SweepEntry>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cosine_profile: Option<CosineProfile>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub distributions: Option<ActivationDistributions>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub comparisons: Vec<ModeComparison>,
}

pub const REPORT_FORMAT: &str = "hiertopk-eval-report/1";

impl EvalReport {
    pub fn new(model_digest: String, data_digest: String, rows: usize, opts: &EvalOptions) -> Self {
        Self {
            format: REPORT_FORMAT.into(),
            model_digest,
            data_digest,
            rows,
            dead_threshold: opts.dead_threshold,
            dead_window: opts.dead_window,
            entries: Vec::new(),
            cosine_profile: None,
            distributions: None,
            comparisons: Vec::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Domain(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s).map_err(|e| Error::Domain(e.to_string()))?;
        if r.format != REPORT_FORMAT {
            return Err(Error::Domain(format!(
                "unknown report format {:?}",
                r.format
            )));
        }
        Ok(r)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = self.to_json()?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    /// `mode,k,l0,fvu,explained_variance,almost_dead` rows for plotting.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "mode,k,l0,fvu,explained_variance,almost_dead")?;
        for e in &self.entries {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                e.mode, e.k, e.l0, e.fvu, e.explained_variance, e.almost_dead
            )?;
        }
        Ok(())
    }
}
