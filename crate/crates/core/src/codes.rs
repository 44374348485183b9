//! Sparsity mechanisms: per-sample TopK, BatchTopK, constant-threshold
//! JumpReLU at inference, and the schedule of supervised prefix levels.
//!
//! Every selector applies ReLU first and emits codes ordered by descending
//! value with ties broken by ascending dictionary index, so the first `j`
//! entries of a code are exactly its top-`j` latents.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Active latents of one sample, strongest first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseCode<T> {
    pub indices: Vec<u32>,
    pub values: Vec<T>,
}

#[inline]
fn rank_order<T: Scalar>(va: T, ia: u32, vb: T, ib: u32) -> Ordering {
    vb.partial_cmp(&va)
        .unwrap_or(Ordering::Equal)
        .then(ia.cmp(&ib))
}

impl<T: Scalar> SparseCode<T> {
    pub fn empty() -> Self {
        Self {
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds a code from unordered `(index, value)` pairs, dropping
    /// non-positive values and sorting into canonical order.
    pub fn from_pairs(mut pairs: Vec<(u32, T)>) -> Self {
        pairs.retain(|&(_, v)| v > T::zero());
        pairs.sort_unstable_by(|a, b| rank_order(a.1, a.0, b.1, b.0));
        let (indices, values) = pairs.into_iter().unzip();
        Self { indices, values }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// The top-`j` prefix.
    pub fn truncate(&self, j: usize) -> Self {
        let j = j.min(self.len());
        Self {
            indices: self.indices[..j].to_vec(),
            values: self.values[..j].to_vec(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, T)> + '_ {
        self.indices
            .iter()
            .zip(&self.values)
            .map(|(&i, &v)| (i as usize, v))
    }

    /// Checks ordering, positivity and uniqueness.
    pub fn is_canonical(&self) -> bool {
        if self.indices.len() != self.values.len() {
            return false;
        }
        if self.values.iter().any(|&v| v <= T::zero()) {
            return false;
        }
        let ordered = self
            .iter()
            .zip(self.iter().skip(1))
            .all(|((ia, va), (ib, vb))| rank_order(va, ia as u32, vb, ib as u32) == Ordering::Less);
        let mut seen = self.indices.clone();
        seen.sort_unstable();
        seen.dedup();
        ordered && seen.len() == self.indices.len()
    }
}

/// ReLU followed by the `k` largest entries.
pub fn topk_select<T: Scalar>(preacts: &[T], k: usize) -> Result<SparseCode<T>> {
    let d = preacts.len();
    if k < 1 || k > d {
        return Err(Error::Domain(format!("k = {k} outside [1, {d}]")));
    }
    let mut pos: Vec<(u32, T)> = preacts
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > T::zero())
        .map(|(i, &v)| (i as u32, v))
        .collect();
    if pos.len() > k {
        pos.select_nth_unstable_by(k - 1, |a, b| rank_order(a.1, a.0, b.1, b.0));
        pos.truncate(k);
    }
    Ok(SparseCode::from_pairs(pos))
}

/// One positive latent of a batch, used for batch-level ranking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchEntry<T> {
    pub value: T,
    pub sample: u32,
    pub index: u32,
}

fn batch_order<T: Scalar>(a: &BatchEntry<T>, b: &BatchEntry<T>) -> Ordering {
    b.value
        .partial_cmp(&a.value)
        .unwrap_or(Ordering::Equal)
        .then(a.sample.cmp(&b.sample))
        .then(a.index.cmp(&b.index))
}

/// The `limit` largest positive entries of the whole batch, sorted.
/// Ties are broken by sample, then by index.
pub fn batch_ranked<T: Scalar>(preacts: &Matrix<T>, limit: usize) -> Vec<BatchEntry<T>> {
    let mut all: Vec<BatchEntry<T>> = Vec::new();
    for (s, row) in preacts.iter_rows().enumerate() {
        for (i, &v) in row.iter().enumerate() {
            if v > T::zero() {
                all.push(BatchEntry {
                    value: v,
                    sample: s as u32,
                    index: i as u32,
                });
            }
        }
    }
    if all.len() > limit && limit > 0 {
        all.select_nth_unstable_by(limit - 1, batch_order);
    }
    all.truncate(limit);
    all.sort_unstable_by(batch_order);
    all
}

/// Splits a batch ranking back into per-sample codes.
pub fn group_by_sample<T: Scalar>(entries: &[BatchEntry<T>], batch: usize) -> Vec<SparseCode<T>> {
    let mut codes = vec![SparseCode::empty(); batch];
    // entries arrive globally sorted, so each sample's list is already ordered
    for e in entries {
        let c = &mut codes[e.sample as usize];
        c.indices.push(e.index);
        c.values.push(e.value);
    }
    codes
}

/// ReLU followed by the `B * k` largest entries of the whole batch.
pub fn batchtopk_select<T: Scalar>(preacts: &Matrix<T>, k: usize) -> Result<Vec<SparseCode<T>>> {
    let d = preacts.cols();
    if k < 1 || k > d {
        return Err(Error::Domain(format!("k = {k} outside [1, {d}]")));
    }
    let b = preacts.rows();
    let ranked = batch_ranked(preacts, b * k);
    Ok(group_by_sample(&ranked, b))
}

/// Per-sample TopK over every row of a matrix.
pub fn topk_rows<T: Scalar>(preacts: &Matrix<T>, k: usize) -> Result<Vec<SparseCode<T>>> {
    preacts.iter_rows().map(|r| topk_select(r, k)).collect()
}

/// Supervised prefix levels, strictly increasing, largest = the budget `K`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexSchedule {
    levels: Vec<usize>,
    appended_endpoint: bool,
}

impl IndexSchedule {
    pub fn from_levels(levels: Vec<usize>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Domain("empty index schedule".into()));
        }
        if levels[0] == 0 || levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain(format!(
                "schedule levels must be positive and strictly increasing: {levels:?}"
            )));
        }
        Ok(Self {
            levels,
            appended_endpoint: false,
        })
    }

    /// `{k}`: the plain TopK objective.
    pub fn singleton(k: usize) -> Self {
        Self {
            levels: vec![k.max(1)],
            appended_endpoint: false,
        }
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn max_level(&self) -> usize {
        *self.levels.last().expect("schedule is non-empty")
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// True when `k` was not a multiple of the stride and had to be appended.
    pub fn appended_endpoint(&self) -> bool {
        self.appended_endpoint
    }

    pub fn contains(&self, j: usize) -> bool {
        self.levels.binary_search(&j).is_ok()
    }
}

impl std::fmt::Display for IndexSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{{")?;
        for (n, l) in self.levels.iter().enumerate() {
            if n > 0 {
                write!(f, ",")?;
            }
            write!(f, "{l}")?;
        }
        write!(f, "}}")
    }
}

impl std::str::FromStr for IndexSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let inner = s.trim().trim_start_matches('{').trim_end_matches('}');
        let levels = inner
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::Domain(format!("bad schedule level {t:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_levels(levels)
    }
}

/// `{1} ∪ {i : i mod stride = 0, 1 < i <= k}`, with `k` appended when the
/// stride does not divide it.
pub fn make_schedule(stride: usize, k: usize) -> Result<IndexSchedule> {
    if stride < 1 || k < 1 {
        return Err(Error::Domain(format!(
            "stride and k must be >= 1 (stride = {stride}, k = {k})"
        )));
    }
    let mut levels = vec![1];
    levels.extend((2..=k).filter(|i| i % stride == 0));
    let appended_endpoint = *levels.last().unwrap() != k;
    if appended_endpoint {
        levels.push(k);
    }
    Ok(IndexSchedule {
        levels,
        appended_endpoint,
    })
}

/// Constant activation cutoff used for JumpReLU inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpReluThreshold {
    pub theta: f64,
}

/// Pooled empirical `(1 - target_k / D)` quantile of post-ReLU latents, with
/// linear interpolation between order statistics.
pub fn calibrate_jumprelu<T, I, R>(stream: I, target_k: usize) -> Result<JumpReluThreshold>
where
    T: Scalar,
    I: IntoIterator<Item = R>,
    R: AsRef<[T]>,
{
    let (mut pooled, d) = pool_relu(stream)?;
    if target_k >= d {
        return Ok(JumpReluThreshold { theta: 0.0 });
    }
    let q = 1.0 - target_k as f64 / d as f64;
    Ok(JumpReluThreshold {
        theta: quantile_in_place(&mut pooled, q),
    })
}

/// Thresholds for several targets from one pass over the stream.
pub fn calibrate_jumprelu_many<T, I, R>(
    stream: I,
    targets: &[usize],
) -> Result<Vec<JumpReluThreshold>>
where
    T: Scalar,
    I: IntoIterator<Item = R>,
    R: AsRef<[T]>,
{
    let (mut pooled, d) = pool_relu(stream)?;
    pooled.sort_unstable_by(f64::total_cmp);
    let n = pooled.len();
    Ok(targets
        .iter()
        .map(|&k| {
            if k >= d {
                return JumpReluThreshold { theta: 0.0 };
            }
            let pos = (1.0 - k as f64 / d as f64) * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let frac = pos - lo as f64;
            let theta = if frac == 0.0 || lo + 1 >= n {
                pooled[lo]
            } else {
                pooled[lo] + frac * (pooled[lo + 1] - pooled[lo])
            };
            JumpReluThreshold { theta }
        })
        .collect())
}

fn pool_relu<T, I, R>(stream: I) -> Result<(Vec<f64>, usize)>
where
    T: Scalar,
    I: IntoIterator<Item = R>,
    R: AsRef<[T]>,
{
    let mut pooled: Vec<f64> = Vec::new();
    let mut dim = None;
    for row in stream {
        let row = row.as_ref();
        match dim {
            None => dim = Some(row.len()),
            Some(d) if d != row.len() => return Err(shape_err("calibrate_jumprelu", d, row.len())),
            _ => {}
        }
        pooled.extend(row.iter().map(|v| v.wide().max(0.0)));
    }
    match dim {
        Some(d) if d > 0 => Ok((pooled, d)),
        _ => Err(Error::Domain("empty calibration stream".into())),
    }
}

/// Linear-interpolated quantile; reorders `xs`.
pub(crate) fn quantile_in_place(xs: &mut [f64], q: f64) -> f64 {
    let n = xs.len();
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    let (_, &mut lo_v, upper) = xs.select_nth_unstable_by(lo, f64::total_cmp);
    if frac == 0.0 || upper.is_empty() {
        return lo_v;
    }
    let hi_v = upper.iter().copied().fold(f64::INFINITY, f64::min);
    lo_v + frac * (hi_v - lo_v)
}

/// Keeps entries strictly above `theta` (and above zero).
pub fn apply_jumprelu<T: Scalar>(preacts: &[T], threshold: JumpReluThreshold) -> SparseCode<T> {
    let pairs = preacts
        .iter()
        .enumerate()
        .filter(|(_, &v)| v.wide() > threshold.theta)
        .map(|(i, &v)| (i as u32, v))
        .collect();
    SparseCode::from_pairs(pairs)
}
