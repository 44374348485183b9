//! Hierarchical reconstruction loss over prefix levels of the sorted code.
//!
//! For a code `(idx_1, v_1), ..., (idx_L, v_L)` the level-`j` reconstruction
//! is `x_hat_j = b_dec + sum_{i <= min(j, L)} v_i e_{idx_i}`. The loss is the
//! mean over the schedule, the batch and the hidden dimension of
//! `(x_hat_j - x)^2`. A schedule of one level is the ordinary TopK loss.
//!
//! [`loss_naive`] materializes every cumulative reconstruction (`B x K x h`)
//! and serves as the reference. [`loss_fused_into`] streams each sample once
//! forward and once backward with `O(h + K)` scratch: the backward sweep
//! carries the suffix sum `S_i = sum_{j in J, j >= i} r_j` and recovers
//! `r_{i-1} = r_i - v_i e_{idx_i}` in place.

use crate::codes::{IndexSchedule, SparseCode};
use crate::error::{shape_err, Error, Result};
use crate::linalg::Matrix;
use crate::model::SaeParams;
use crate::scalar::Scalar;

/// Loss summary: the objective and each supervised level's contribution.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub total: f64,
    /// `(level, mean squared error at that level)`, in schedule order.
    pub per_level: Vec<(usize, f64)>,
}

impl LossValue {
    pub fn level(&self, j: usize) -> Option<f64> {
        self.per_level.iter().find(|(l, _)| *l == j).map(|p| p.1)
    }
}

/// Gradients with the same shapes as [`SaeParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub w_enc: Matrix<T>,
    pub b_enc: Vec<T>,
    pub w_dec: Matrix<T>,
    pub b_dec: Vec<T>,
}

impl<T: Scalar> Grads<T> {
    pub fn zeros(dict_size: usize, hidden: usize) -> Self {
        Self {
            w_enc: Matrix::zeros(dict_size, hidden),
            b_enc: vec![T::zero(); dict_size],
            w_dec: Matrix::zeros(dict_size, hidden),
            b_dec: vec![T::zero(); hidden],
        }
    }

    pub fn for_params(p: &SaeParams<T>) -> Self {
        Self::zeros(p.dict_size(), p.hidden())
    }

    pub fn clear(&mut self) {
        self.w_enc.fill(T::zero());
        self.w_dec.fill(T::zero());
        self.b_enc.iter_mut().for_each(|v| *v = T::zero());
        self.b_dec.iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn tensors(&self) -> [&[T]; 4] {
        [
            self.w_enc.as_slice(),
            &self.b_enc,
            self.w_dec.as_slice(),
            &self.b_dec,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

fn validate<T: Scalar>(
    params: &SaeParams<T>,
    codes: &[SparseCode<T>],
    targets: &Matrix<T>,
    schedule: &IndexSchedule,
) -> Result<()> {
    if schedule.is_empty() {
        return Err(Error::Domain("empty index schedule".into()));
    }
    if targets.cols() != params.hidden() {
        return Err(shape_err(
            "hierarchical loss",
            params.hidden(),
            targets.cols(),
        ));
    }
    if codes.len() != targets.rows() {
        return Err(shape_err(
            "hierarchical loss",
            format!("{} codes", targets.rows()),
            codes.len(),
        ));
    }
    if targets.rows() == 0 {
        return Err(Error::Domain("empty batch".into()));
    }
    let d = params.dict_size();
    if let Some(bad) = codes
        .iter()
        .flat_map(|c| &c.indices)
        .find(|&&i| i as usize >= d)
    {
        return Err(shape_err("hierarchical loss", format!("index < {d}"), bad));
    }
    Ok(())
}

/// Reference implementation: materializes the full `B x K x h` tensor of
/// cumulative reconstructions, zero-padding codes shorter than `K`.
pub fn loss_naive<T: Scalar>(
    params: &SaeParams<T>,
    codes: &[SparseCode<T>],
    targets: &Matrix<T>,
    schedule: &IndexSchedule,
) -> Result<LossValue> {
    validate(params, codes, targets, schedule)?;
    let (b, h, k) = (targets.rows(), params.hidden(), schedule.max_level());
    let mut cum = vec![T::zero(); b * k * h];
    for (s, code) in codes.iter().enumerate() {
        let mut acc = vec![T::zero(); h];
        for j in 0..k {
            if let Some((i, v)) = code.iter().nth(j) {
                let e = params.w_dec.row(i);
                for t in 0..h {
                    acc[t] += v * e[t];
                }
            }
            cum[(s * k + j) * h..(s * k + j + 1) * h].copy_from_slice(&acc);
        }
    }
    let per_level: Vec<(usize, f64)> = schedule
        .levels()
        .iter()
        .map(|&j| {
            let mut sum = 0.0f64;
            for s in 0..b {
                let rec = &cum[(s * k + j - 1) * h..(s * k + j) * h];
                let x = targets.row(s);
                for t in 0..h {
                    let r = (rec[t] + params.b_dec[t] - x[t]).wide();
                    sum += r * r;
                }
            }
            (j, sum / (b * h) as f64)
        })
        .collect();
    let total = per_level.iter().map(|p| p.1).sum::<f64>() / per_level.len() as f64;
    Ok(LossValue { total, per_level })
}

/// Per-sample scratch, reused across the batch.
struct Scratch<T> {
    resid: Vec<T>,
    suffix: Vec<T>,
    /// squared residual norm after `i` terms, for `i = 0..=L`
    sq_at: Vec<f64>,
    /// number of supervised levels whose effective prefix length is `i`
    weight: Vec<u32>,
}

/// Streaming hierarchical loss; writes gradients into `grads` (cleared first)
/// when given. Samples are processed sequentially so gradient accumulation
/// order is fixed.
pub fn loss_fused_into<T: Scalar>(
    params: &SaeParams<T>,
    codes: &[SparseCode<T>],
    targets: &Matrix<T>,
    schedule: &IndexSchedule,
    mut grads: Option<&mut Grads<T>>,
) -> Result<LossValue> {
    validate(params, codes, targets, schedule)?;
    let (b, h) = (targets.rows(), params.hidden());
    let levels = schedule.levels();
    let n_levels = levels.len();
    if let Some(g) = grads.as_deref_mut() {
        if g.w_dec.rows() != params.dict_size() || g.w_dec.cols() != h {
            return Err(shape_err(
                "loss_fused_into",
                format!("{}x{} grads", params.dict_size(), h),
                format!("{}x{}", g.w_dec.rows(), g.w_dec.cols()),
            ));
        }
        g.clear();
    }
    // d loss / d x_hat_j = 2 (x_hat_j - x) / (|J| B h)
    let scale = T::of(2.0 / (n_levels * b * h) as f64);
    let cap = codes.iter().map(|c| c.len()).max().unwrap_or(0) + 1;
    let mut sc = Scratch {
        resid: vec![T::zero(); h],
        suffix: vec![T::zero(); h],
        sq_at: Vec::with_capacity(cap),
        weight: Vec::with_capacity(cap),
    };
    let mut level_sums = vec![0.0f64; n_levels];

    for (s, code) in codes.iter().enumerate() {
        let x = targets.row(s);
        let len = code.len();
        sc.weight.clear();
        sc.weight.resize(len + 1, 0);
        for &j in levels {
            sc.weight[j.min(len)] += 1;
        }

        // forward: r_0 = b_dec - x, r_i = r_{i-1} + v_i e_i
        for ((r, &b), &xt) in sc.resid.iter_mut().zip(&params.b_dec).zip(x) {
            *r = b - xt;
        }
        sc.sq_at.clear();
        sc.sq_at.resize(len + 1, 0.0);
        if sc.weight[0] > 0 {
            sc.sq_at[0] = sq_wide(&sc.resid);
        }
        for (i, (idx, v)) in code.iter().enumerate() {
            let e = params.w_dec.row(idx);
            if sc.weight[i + 1] > 0 {
                sc.sq_at[i + 1] = axpy_sq(v, e, &mut sc.resid);
            } else {
                crate::linalg::axpy(v, e, &mut sc.resid);
            }
        }
        for (n, &j) in levels.iter().enumerate() {
            level_sums[n] += sc.sq_at[j.min(len)];
        }

        let Some(g) = grads.as_deref_mut() else {
            continue;
        };

        // backward: S_i accumulates w_i r_i from the top level down
        let lowest = sc.weight.iter().position(|&w| w > 0).unwrap_or(0);
        sc.suffix.iter_mut().for_each(|v| *v = T::zero());
        for i in (1..=len).rev() {
            let idx = code.indices[i - 1] as usize;
            let v = code.values[i - 1];
            let w = T::of(sc.weight[i] as f64);
            let rewind = i > lowest;
            let e = params.w_dec.row(idx);
            let dot_es = backward_step(
                e,
                &mut sc.suffix,
                &mut sc.resid,
                g.w_dec.row_mut(idx),
                w,
                scale * v,
                v,
                sc.weight[i] > 0,
                rewind,
            );
            let dv = scale * dot_es;
            g.b_enc[idx] += dv;
            crate::linalg::axpy(dv, x, g.w_enc.row_mut(idx));
        }
        if sc.weight[0] > 0 {
            crate::linalg::axpy(T::of(sc.weight[0] as f64), &sc.resid, &mut sc.suffix);
        }
        crate::linalg::axpy(scale, &sc.suffix, &mut g.b_dec);
    }

    let per_level: Vec<(usize, f64)> = levels
        .iter()
        .zip(&level_sums)
        .map(|(&j, &s)| (j, s / (b * h) as f64))
        .collect();
    let total = per_level.iter().map(|p| p.1).sum::<f64>() / n_levels as f64;
    Ok(LossValue { total, per_level })
}

#[inline]
fn sq_wide<T: Scalar>(r: &[T]) -> f64 {
    crate::linalg::sq_norm(r).wide()
}

/// `r += v e`, returning the new `|r|^2`.
#[inline]
fn axpy_sq<T: Scalar>(v: T, e: &[T], r: &mut [T]) -> f64 {
    let n = r.len();
    let e = &e[..n];
    let mut acc = [T::zero(); 8];
    let mut t = 0;
    while t + 8 <= n {
        for l in 0..8 {
            let y = r[t + l] + v * e[t + l];
            r[t + l] = y;
            acc[l] += y * y;
        }
        t += 8;
    }
    let mut tail = T::zero();
    while t < n {
        let y = r[t] + v * e[t];
        r[t] = y;
        tail += y * y;
        t += 1;
    }
    (acc.iter().copied().sum::<T>() + tail).wide()
}

/// One fused backward step for prefix position `i`:
/// optionally `S += w r`, then `dW_dec_row += a S`, optionally
/// `r -= v e`; returns `e . S`.
#[allow(clippy::too_many_arguments)]
#[inline]
fn backward_step<T: Scalar>(
    e: &[T],
    suffix: &mut [T],
    resid: &mut [T],
    dw_row: &mut [T],
    w: T,
    a: T,
    v: T,
    accumulate: bool,
    rewind: bool,
) -> T {
    let n = suffix.len();
    let (e, resid, dw_row) = (&e[..n], &mut resid[..n], &mut dw_row[..n]);
    let mut acc = [T::zero(); 8];
    let mut t = 0;
    macro_rules! body {
        ($k:expr, $lane:expr) => {{
            let k = $k;
            if accumulate {
                suffix[k] += w * resid[k];
            }
            let s = suffix[k];
            $lane += e[k] * s;
            dw_row[k] += a * s;
            if rewind {
                resid[k] -= v * e[k];
            }
        }};
    }
    while t + 8 <= n {
        for (l, a) in acc.iter_mut().enumerate() {
            body!(t + l, *a);
        }
        t += 8;
    }
    let mut tail = T::zero();
    while t < n {
        body!(t, tail);
        t += 1;
    }
    acc.iter().copied().sum::<T>() + tail
}

/// Hierarchical loss and its analytic gradients (straight-through on the
/// selected support).
pub fn loss_fused_with_grads<T: Scalar>(
    params: &SaeParams<T>,
    codes: &[SparseCode<T>],
    targets: &Matrix<T>,
    schedule: &IndexSchedule,
) -> Result<(LossValue, Grads<T>)> {
    let mut g = Grads::for_params(params);
    let loss = loss_fused_into(params, codes, targets, schedule, Some(&mut g))?;
    Ok((loss, g))
}

/// Forward-only hierarchical loss.
pub fn loss_fused<T: Scalar>(
    params: &SaeParams<T>,
    codes: &[SparseCode<T>],
    targets: &Matrix<T>,
    schedule: &IndexSchedule,
) -> Result<LossValue> {
    loss_fused_into(params, codes, targets, schedule, None)
}

/// Plain TopK reconstruction loss: the hierarchical path with schedule `{k}`.
pub fn loss_topk<T: Scalar>(
    params: &SaeParams<T>,
    codes: &[SparseCode<T>],
    targets: &Matrix<T>,
    k: usize,
) -> Result<LossValue> {
    loss_fused(params, codes, targets, &IndexSchedule::singleton(k))
}

pub fn loss_topk_with_grads<T: Scalar>(
    params: &SaeParams<T>,
    codes: &[SparseCode<T>],
    targets: &Matrix<T>,
    k: usize,
) -> Result<(LossValue, Grads<T>)> {
    loss_fused_with_grads(params, codes, targets, &IndexSchedule::singleton(k))
}
