//! Adam with bias correction, and the unit-norm decoder constraint.
//!
//! The constraint is kept in two halves: before the Adam step each decoder
//! row's gradient is projected onto the tangent space of the unit sphere at
//! that row; after the step each row is rescaled to unit length.

use rayon::prelude::*;

use crate::error::{shape_err, Result};
use crate::hloss::Grads;
use crate::linalg::{dot, sq_norm};
use crate::model::SaeParams;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.0008,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

const PAR_MIN: usize = 1 << 14;

impl<T: Scalar> AdamState<T> {
    /// State for a list of parameter tensors with the given lengths.
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            first: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn for_params(config: AdamConfig, p: &SaeParams<T>) -> Self {
        Self::new(config, &p.tensors().map(|t| t.len()))
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update over paired `(parameter, gradient)` tensors.
    pub fn step_tensors(&mut self, tensors: &mut [(&mut [T], &[T])]) -> Result<()> {
        if tensors.len() != self.first.len() {
            return Err(shape_err("adam_step", self.first.len(), tensors.len()));
        }
        for (n, (p, g)) in tensors.iter().enumerate() {
            if p.len() != self.first[n].len() || g.len() != p.len() {
                return Err(shape_err(
                    "adam_step",
                    self.first[n].len(),
                    format!("param {} / grad {}", p.len(), g.len()),
                ));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = T::of(c.beta1);
        let b2 = T::of(c.beta2);
        let one = T::one();
        let corr1 = T::of(1.0 - c.beta1.powi(t));
        let corr2 = T::of(1.0 - c.beta2.powi(t));
        let lr = T::of(c.lr);
        let eps = T::of(c.eps);
        let update = |p: &mut T, g: T, m: &mut T, v: &mut T| {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / corr1;
            let v_hat = *v / corr2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        for (n, (p, g)) in tensors.iter_mut().enumerate() {
            let (m, v) = (&mut self.first[n], &mut self.second[n]);
            if p.len() >= PAR_MIN {
                p.par_chunks_mut(4096)
                    .zip(g.par_chunks(4096))
                    .zip(m.par_chunks_mut(4096))
                    .zip(v.par_chunks_mut(4096))
                    .for_each(|(((p, g), m), v)| {
                        for i in 0..p.len() {
                            update(&mut p[i], g[i], &mut m[i], &mut v[i]);
                        }
                    });
            } else {
                for i in 0..p.len() {
                    update(&mut p[i], g[i], &mut m[i], &mut v[i]);
                }
            }
        }
        Ok(())
    }

    /// Adam over all four SAE tensors.
    pub fn step(&mut self, params: &mut SaeParams<T>, grads: &Grads<T>) -> Result<()> {
        let SaeParams {
            w_enc,
            b_enc,
            w_dec,
            b_dec,
        } = params;
        self.step_tensors(&mut [
            (w_enc.as_mut_slice(), grads.w_enc.as_slice()),
            (b_enc.as_mut_slice(), &grads.b_enc),
            (w_dec.as_mut_slice(), grads.w_dec.as_slice()),
            (b_dec.as_mut_slice(), &grads.b_dec),
        ])
    }
}

/// Removes from each decoder-row gradient its component along the row.
/// Returns the number of zero-norm rows, which are left untouched.
pub fn project_decoder_grads<T: Scalar>(params: &SaeParams<T>, grads: &mut Grads<T>) -> usize {
    let h = params.hidden();
    grads
        .w_dec
        .as_mut_slice()
        .par_chunks_mut(h.max(1))
        .enumerate()
        .map(|(i, g)| {
            let e = params.w_dec.row(i);
            let nn = sq_norm(e);
            if nn == T::zero() {
                return 1;
            }
            let c = dot(g, e) / nn;
            if c != T::zero() {
                for (gt, &et) in g.iter_mut().zip(e) {
                    *gt -= c * et;
                }
            }
            0
        })
        .sum()
}

/// Rescales every decoder row to unit length; returns the count of zero rows.
pub fn renormalize_decoder<T: Scalar>(params: &mut SaeParams<T>) -> usize {
    let h = params.hidden();
    params
        .w_dec
        .as_mut_slice()
        .par_chunks_mut(h.max(1))
        .map(|row| {
            let n = T::of(sq_norm(row).wide().sqrt());
            if n == T::zero() {
                return 1;
            }
            row.iter_mut().for_each(|v| *v /= n);
            0
        })
        .sum()
}
