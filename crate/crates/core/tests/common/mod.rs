//! Reference helpers shared by the integration suites. Nothing here calls the
//! fused loss: oracles are built from decode/encode primitives only.
#![allow(dead_code)]

use hiertopk::codes::{topk_rows, IndexSchedule, SparseCode};
use hiertopk::hloss::loss_naive;
use hiertopk::{Matrix, Rng, SaeParams};

/// Random instance with non-trivial biases and an untied encoder.
pub fn random_instance(seed: u64, b: usize, d: usize, h: usize) -> (SaeParams<f64>, Matrix<f64>) {
    let mut rng = Rng::new(seed);
    let mut p = SaeParams::<f64>::init(d, h, &mut rng);
    p.w_enc = rng.normal_matrix(d, h);
    p.b_enc = (0..d).map(|_| 0.2 * rng.normal()).collect();
    p.b_dec = (0..h).map(|_| 0.2 * rng.normal()).collect();
    let x = rng.normal_matrix(b, h);
    (p, x)
}

/// Full objective as a function of all parameters: encode, TopK, naive loss.
pub fn objective(p: &SaeParams<f64>, x: &Matrix<f64>, k: usize, schedule: &IndexSchedule) -> f64 {
    let codes = topk_rows(&p.encode_batch(x).unwrap(), k).unwrap();
    loss_naive(p, &codes, x, schedule).unwrap().total
}

pub fn codes_for(p: &SaeParams<f64>, x: &Matrix<f64>, k: usize) -> Vec<SparseCode<f64>> {
    topk_rows(&p.encode_batch(x).unwrap(), k).unwrap()
}

/// Smallest gap between the k-th and (k+1)-th positive pre-activation, and
/// between the smallest kept value and zero, across the batch. A central
/// difference with step below this gap cannot change the TopK support.
pub fn selection_margin(p: &SaeParams<f64>, x: &Matrix<f64>, k: usize) -> f64 {
    let pre = p.encode_batch(x).unwrap();
    let mut margin = f64::INFINITY;
    for row in pre.iter_rows() {
        let mut v: Vec<f64> = row.to_vec();
        v.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for w in v.windows(2).take(k) {
            margin = margin.min(w[0] - w[1]);
        }
        for &u in v.iter().take(k + 1) {
            margin = margin.min(u.abs());
        }
    }
    margin
}

pub type Accessor = fn(&mut SaeParams<f64>) -> &mut [f64];

pub fn tensor_accessors() -> [(&'static str, Accessor); 4] {
    [
        ("W_enc", |p| p.w_enc.as_mut_slice()),
        ("b_enc", |p| p.b_enc.as_mut_slice()),
        ("W_dec", |p| p.w_dec.as_mut_slice()),
        ("b_dec", |p| p.b_dec.as_mut_slice()),
    ]
}

/// Central differences of `objective` for every entry of every tensor.
pub fn finite_difference_grads(
    p: &SaeParams<f64>,
    x: &Matrix<f64>,
    k: usize,
    schedule: &IndexSchedule,
    step: f64,
) -> Vec<Vec<f64>> {
    tensor_accessors()
        .iter()
        .map(|(_, acc)| {
            let mut q = p.clone();
            let n = acc(&mut q).len();
            (0..n)
                .map(|i| {
                    let orig = acc(&mut q)[i];
                    acc(&mut q)[i] = orig + step;
                    let up = objective(&q, x, k, schedule);
                    acc(&mut q)[i] = orig - step;
                    let down = objective(&q, x, k, schedule);
                    acc(&mut q)[i] = orig;
                    (up - down) / (2.0 * step)
                })
                .collect()
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)`, or the absolute gap when both are below `floor`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    let m = a.abs().max(b.abs());
    if m < floor {
        (a - b).abs()
    } else {
        (a - b).abs() / m
    }
}

pub fn rng(seed: u64) -> Rng {
    Rng::new(seed)
}
