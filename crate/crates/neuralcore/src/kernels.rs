//! Dense loops shared by the taped graph and tape-free inference paths.
//!
//! Accumulation order is fixed so that both paths produce bit-identical
//! values for the same inputs.

use crate::Real;

/// `a[m,k] · b[k,n]`. Zero entries of `a` are skipped, which makes one-hot
/// inputs cheap.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            axpy(c_row, av, &b[p * n..(p + 1) * n]);
        }
    }
    c
}

/// `aᵀ · c` accumulated into `out[k,n]`, where `a` is `[m,k]` and `c` is `[m,n]`.
pub(crate) fn matmul_tn_acc<T: Real>(out: &mut [T], a: &[T], c: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            axpy(&mut out[p * n..(p + 1) * n], av, c_row);
        }
    }
}

pub(crate) fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

#[inline]
pub(crate) fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_row_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = 0.0f64;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += x.as_f64();
    }
    let denom = T::of_f64(sum);
    for x in row.iter_mut() {
        *x /= denom;
    }
}

pub fn log_softmax_row<T: Real>(row: &[T], out: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = 0.0f64;
    for &x in row {
        sum += (x - max).exp().as_f64();
    }
    let lse = max + T::of_f64(sum.ln());
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalizes a row to zero mean and unit variance; returns `1/σ`.
pub fn layer_norm_row<T: Real>(x: &[T], out: &mut [T]) -> T {
    let n = x.len() as f64;
    let mean = x.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let var = x.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    let mean_t = T::of_f64(mean);
    let inv_t = T::of_f64(inv);
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - mean_t) * inv_t;
    }
    inv_t
}

/// Causal attention for one query row over keys `0..n`.
///
/// `keys` and `values` hold rows of width `stride`; the head occupies
/// columns `col..col + q.len()`. Writes the attention weights to
/// `probs[..n]` and accumulates the weighted values into `out`.
#[allow(clippy::too_many_arguments)]
pub fn attend_row<T: Real>(
    q: &[T],
    keys: &[T],
    values: &[T],
    stride: usize,
    col: usize,
    n: usize,
    scale: T,
    probs: &mut [T],
    out: &mut [T],
) {
    let dh = q.len();
    for j in 0..n {
        let k = &keys[j * stride + col..j * stride + col + dh];
        probs[j] = dot(q, k) * scale;
    }
    softmax_row_in_place(&mut probs[..n]);
    for v in out.iter_mut() {
        *v = T::zero();
    }
    for j in 0..n {
        let v = &values[j * stride + col..j * stride + col + dh];
        axpy(out, probs[j], v);
    }
}
