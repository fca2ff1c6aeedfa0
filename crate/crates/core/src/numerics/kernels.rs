//! Plain forward kernels shared by the inference path and the tape.
//!
//! Accumulation order is fixed (ascending inner index, starting from zero) so
//! a row computed alone is bitwise identical to the same row computed inside
//! a larger batch.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `sqrt(2 / pi)` and the cubic coefficient of the tanh GELU approximation.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

/// `out[m×n] += a[m×k] · b[k×n]`
///
/// Works on `4 × 8` output tiles held in registers. Every element is still
/// accumulated in ascending `k` order.
pub fn matmul_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    const MR: usize = 4;
    const NR: usize = 8;
    let (m_main, n_main) = (m - m % MR, n - n % NR);
    for i in (0..m_main).step_by(MR) {
        for j in (0..n_main).step_by(NR) {
            let mut acc = [[F::zero(); NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&out[(i + r) * n + j..][..NR]);
            }
            for p in 0..k {
                let bv: &[F; NR] = b[p * n + j..][..NR].try_into().unwrap();
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + p];
                    for c in 0..NR {
                        row[c] = row[c] + av * bv[c];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(i + r) * n + j..][..NR].copy_from_slice(row);
            }
        }
        if n_main < n {
            matmul_tail(a, b, out, i..i + MR, n_main..n, k, n);
        }
    }
    if m_main < m {
        matmul_tail(a, b, out, m_main..m, 0..n, k, n);
    }
}

fn matmul_tail<F: Scalar>(
    a: &[F],
    b: &[F],
    out: &mut [F],
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    k: usize,
    n: usize,
) {
    for i in rows {
        let orow = &mut out[i * n + cols.start..i * n + cols.end];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n + cols.start..p * n + cols.end];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    // Transposing first keeps the inner loop contiguous.
    let mut bt = vec![F::zero(); k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    matmul_acc(a, &bt, out, m, k, n);
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_tn_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = a.dims2();
    let (k2, n) = b.dims2();
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = Tensor::zeros(&[m, n]);
    matmul_acc(a.data(), b.data(), out.data_mut(), m, k, n);
    Ok(out)
}

/// `a · b[:, cols]` without materializing the column slice. Each output
/// element is accumulated exactly as in [`matmul`].
pub fn matmul_cols<F: Scalar>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    cols: std::ops::Range<usize>,
) -> Result<Tensor<F>> {
    let (m, k) = a.dims2();
    let (k2, n) = b.dims2();
    if k != k2 || cols.end > n {
        return Err(Error::shape("matmul_cols", a.shape(), b.shape()));
    }
    let w = cols.len();
    let mut out = Tensor::zeros(&[m, w]);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for i in 0..m {
        let orow = &mut od[i * w..(i + 1) * w];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n + cols.start..p * n + cols.end];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Ok(out)
}

/// Causal attention for a single query row.
///
/// Keys and values are rows `0..n_keys` of `keys`/`values`, read at column
/// `offset..offset + q.len()` with row stride `stride`. Writes the attention
/// probabilities to `probs[..n_keys]` and the weighted value sum to `out`.
#[allow(clippy::too_many_arguments)]
pub fn attention_row<F: Scalar>(
    q: &[F],
    keys: &[F],
    values: &[F],
    stride: usize,
    offset: usize,
    n_keys: usize,
    scale: F,
    probs: &mut [F],
    out: &mut [F],
) {
    let dh = q.len();
    for (j, p) in probs.iter_mut().enumerate().take(n_keys) {
        let kj = &keys[j * stride + offset..j * stride + offset + dh];
        let mut s = F::zero();
        for (&a, &b) in q.iter().zip(kj) {
            s = s + a * b;
        }
        *p = s * scale;
    }
    softmax_in_place(&mut probs[..n_keys]);
    for o in out.iter_mut() {
        *o = F::zero();
    }
    for (j, &p) in probs.iter().enumerate().take(n_keys) {
        let vj = &values[j * stride + offset..j * stride + offset + dh];
        for (o, &v) in out.iter_mut().zip(vj) {
            *o = *o + p * v;
        }
    }
}

/// Adds `bias` (length = cols) to every row.
pub fn add_row_bias<F: Scalar>(x: &mut Tensor<F>, bias: &Tensor<F>) -> Result<()> {
    let c = x.cols();
    if bias.len() != c {
        return Err(Error::shape("add_row_bias", x.shape(), bias.shape()));
    }
    let b = bias.data();
    for row in x.data_mut().chunks_mut(c) {
        for (v, &bv) in row.iter_mut().zip(b) {
            *v = *v + bv;
        }
    }
    Ok(())
}

pub fn add<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", a.shape(), b.shape()));
    }
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

/// Normalizes one row in place; returns `1 / sqrt(var + eps)`.
pub fn layer_norm_row<F: Scalar>(row: &mut [F], eps: F) -> F {
    let n = F::of(row.len() as f64);
    let mean = row.iter().copied().sum::<F>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
    let inv = F::one() / (var + eps).sqrt();
    for v in row.iter_mut() {
        *v = (*v - mean) * inv;
    }
    inv
}

/// Row-wise layer norm with affine `gain` and `bias` (both of length cols).
pub fn layer_norm<F: Scalar>(
    x: &Tensor<F>,
    gain: &Tensor<F>,
    bias: &Tensor<F>,
    eps: f64,
) -> Result<Tensor<F>> {
    let c = x.cols();
    if gain.len() != c || bias.len() != c {
        return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
    }
    let mut out = x.clone();
    let (g, b) = (gain.data(), bias.data());
    for row in out.data_mut().chunks_mut(c) {
        layer_norm_row(row, F::of(eps));
        for ((v, &gv), &bv) in row.iter_mut().zip(g).zip(b) {
            *v = *v * gv + bv;
        }
    }
    Ok(out)
}

#[inline]
pub fn gelu_scalar<F: Scalar>(x: F) -> F {
    let u = F::of(GELU_C) * (x + F::of(GELU_A) * x * x * x);
    F::of(0.5) * x * (F::one() + u.tanh())
}

#[inline]
pub fn gelu_grad_scalar<F: Scalar>(x: F) -> F {
    let u = F::of(GELU_C) * (x + F::of(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = F::of(GELU_C) * (F::one() + F::of(3.0 * GELU_A) * x * x);
    F::of(0.5) * (F::one() + t) + F::of(0.5) * x * (F::one() - t * t) * du
}

/// Tanh-approximated GELU.
pub fn gelu<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.map(gelu_scalar)
}

#[inline]
pub fn sigmoid_scalar<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Max-subtracted softmax of one slice, in place.
pub fn softmax_in_place<F: Scalar>(v: &mut [F]) {
    let m = v.iter().copied().fold(F::neg_infinity(), F::max);
    let mut s = F::zero();
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s = s + *x;
    }
    for x in v.iter_mut() {
        *x = *x / s;
    }
}

/// `log(sum(exp(v)))`, computed stably.
pub fn log_sum_exp<F: Scalar>(v: &[F]) -> F {
    let m = v.iter().copied().fold(F::neg_infinity(), F::max);
    m + v.iter().map(|&x| (x - m).exp()).sum::<F>().ln()
}

/// Softmax along `axis` of an n-d tensor.
pub fn softmax<F: Scalar>(x: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    if !x.is_finite() {
        return Err(Error::NonFinite);
    }
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::OutOfRange {
            what: "axis",
            index: axis,
            size: shape.len(),
        });
    }
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    let mut buf = vec![F::zero(); len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = data[base + j * inner];
            }
            softmax_in_place(&mut buf);
            for (j, b) in buf.iter().enumerate() {
                data[base + j * inner] = *b;
            }
        }
    }
    Ok(out)
}

/// Gathers rows of `table` (an embedding lookup).
pub fn embedding_lookup<F: Scalar>(table: &Tensor<F>, ids: &[usize]) -> Result<Tensor<F>> {
    let (rows, cols) = table.dims2();
    let mut data = Vec::with_capacity(ids.len() * cols);
    for &id in ids {
        if id >= rows {
            return Err(Error::OutOfRange {
                what: "token",
                index: id,
                size: rows,
            });
        }
        data.extend_from_slice(table.row(id));
    }
    Tensor::matrix(ids.len(), cols, data)
}

/// Mean over rows of `-log softmax(logits_i)[target_i]`.
pub fn cross_entropy<F: Scalar>(logits: &Tensor<F>, targets: &[usize]) -> Result<F> {
    let (n, v) = logits.dims2();
    if n != targets.len() {
        return Err(Error::shape("cross_entropy", logits.shape(), &[targets.len()]));
    }
    let mut total = F::zero();
    for (i, &t) in targets.iter().enumerate() {
        if t >= v {
            return Err(Error::OutOfRange {
                what: "target",
                index: t,
                size: v,
            });
        }
        let row = logits.row(i);
        total = total + log_sum_exp(row) - row[t];
    }
    Ok(total / F::of(n.max(1) as f64))
}

/// Index of the largest element; ties go to the lowest index.
pub fn argmax<F: Scalar>(v: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}
