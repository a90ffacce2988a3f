//! Raw numeric kernels on flat slices, shared by the graph and the analysis code.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `c (+)= op(a) * op(b)` for row-major buffers. `op(a)` is `m x k`,
/// `op(b)` is `k x n`; `trans_a` means `a` is stored as `k x m`.
#[allow(clippy::too_many_arguments)]
pub fn matmul_into<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    let a_strides = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let b_strides = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, a_strides, b, b_strides, beta, c, (n as isize, 1));
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// In-place max-subtracted softmax.
pub fn softmax_in_place<T: Scalar>(x: &mut [T]) {
    let max = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in x.iter_mut() {
        *v = *v / sum;
    }
}

/// `log(sum(exp(x)))`, stable for large magnitudes.
pub fn log_sum_exp<T: Scalar>(x: &[T]) -> T {
    let max = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let sum = x.iter().fold(T::zero(), |s, &v| s + (v - max).exp());
    max + sum.ln()
}

/// Indices of the `k` largest scores, best first. Ties go to the lower index.
pub fn top_k_indices<T: Scalar>(scores: &[T], k: usize) -> Result<Vec<usize>> {
    let n = scores.len();
    if k == 0 || k > n {
        return Err(Error::config(format!("top-k needs 1 <= k <= n, got k={k}, n={n}")));
    }
    let mut selected: Vec<usize> = Vec::with_capacity(k + 1);
    for i in 0..n {
        if selected.len() == k && !beats(scores, i, selected[k - 1]) {
            continue;
        }
        let pos = selected.partition_point(|&j| !beats(scores, i, j));
        selected.insert(pos, i);
        selected.truncate(k);
    }
    Ok(selected)
}

// Strict "i ranks above j": larger score, or equal score and smaller index.
fn beats<T: Scalar>(scores: &[T], i: usize, j: usize) -> bool {
    match scores[i].partial_cmp(&scores[j]) {
        Some(Ordering::Greater) => true,
        Some(Ordering::Equal) => i < j,
        _ => false,
    }
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax<T: Scalar>(x: &[T]) -> usize {
    let mut best = 0;
    for i in 1..x.len() {
        if x[i] > x[best] {
            best = i;
        }
    }
    best
}
