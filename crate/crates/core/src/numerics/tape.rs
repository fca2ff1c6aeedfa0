//! Eager reverse-mode autodiff over 2-D tensors.
//!
//! Every op computes its value immediately and records what its backward
//! pass needs. Parameters are borrowed, so building a graph never copies the
//! weights. [`Graph::backward`] returns a gradient for every node that
//! depends on a parameter; parameters that never reach the loss get none,
//! which [`Gradients::wrt`] reports as zeros.

use std::borrow::Cow;

use super::kernels::{self, gelu_grad_scalar, sigmoid_scalar};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An op defined outside this module. Only the backward rule is needed: the
/// caller supplies the forward value when recording it.
pub trait CustomOp<F: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients w.r.t. each input given the upstream gradient `grad` of the
    /// output. `None` means "no contribution".
    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        output: &Tensor<F>,
        grad: &Tensor<F>,
    ) -> Vec<Option<Tensor<F>>>;
}

enum Op<F: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddConst(Var),
    Gelu(Var),
    Sigmoid(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SelectCols(Var, Vec<usize>),
    ScatterCols(Var, Vec<usize>),
    ExpandGates {
        x: Var,
        col_start: usize,
        groups: usize,
        rows_per: usize,
        width: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<F>,
    },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<F>,
    },
    Sum(Var),
    Mean(Var),
    StraightThrough(Var),
    Custom(Vec<Var>, Box<dyn CustomOp<F>>),
}

struct Node<'p, F: Scalar> {
    value: Cow<'p, Tensor<F>>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Graph<'p, F: Scalar = f32> {
    nodes: Vec<Node<'p, F>>,
}

impl<F: Scalar> Default for Graph<'_, F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, F: Scalar> Graph<'p, F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Tensor<F>>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Cow::Owned(value), op, needs_grad)
    }

    /// A trainable leaf borrowing `t`.
    pub fn param(&mut self, t: &'p Tensor<F>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// A trainable leaf owning its value.
    pub fn param_owned(&mut self, t: Tensor<F>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> F {
        self.value(v).data()[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.derived(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::add(self.value(a), self.value(b))?;
        Ok(self.derived(out, Op::Add(a, b), &[a, b]))
    }

    /// `x + bias` with `bias` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        kernels::add_row_bias(&mut out, self.value(bias))?;
        Ok(self.derived(out, Op::AddRow(x, bias), &[x, bias]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.derived(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = F::of(c);
        let out = self.value(x).map(|v| v * c);
        self.derived(out, Op::Scale(x, c), &[x])
    }

    /// `x + c` for a constant tensor `c` of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor<F>) -> Result<Var> {
        let out = kernels::add(self.value(x), c)?;
        Ok(self.derived(out, Op::AddConst(x), &[x]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = kernels::gelu(self.value(x));
        self.derived(out, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid_scalar);
        self.derived(out, Op::Sigmoid(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(F::zero()));
        self.derived(out, Op::Relu(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let (rows, c) = tx.dims2();
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.len() != c || tb.len() != c {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let mut xhat = tx.data().to_vec();
        let mut inv_std = Vec::with_capacity(rows);
        let eps = F::of(kernels::LAYER_NORM_EPS);
        for row in xhat.chunks_mut(c) {
            inv_std.push(kernels::layer_norm_row(row, eps));
        }
        let (g, b) = (tg.data(), tb.data());
        let mut out = Vec::with_capacity(xhat.len());
        for row in xhat.chunks(c) {
            out.extend(row.iter().zip(g).zip(b).map(|((&v, &gv), &bv)| v * gv + bv));
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.derived(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let out = kernels::embedding_lookup(self.value(x), idx)?;
        Ok(self.derived(out, Op::GatherRows(x, idx.to_vec()), &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<F>> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_rows(&tensors)?;
        Ok(self.derived(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn select_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (rows, c) = tx.dims2();
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::OutOfRange {
                what: "column",
                index: bad,
                size: c,
            });
        }
        let mut data = Vec::with_capacity(rows * idx.len());
        for r in 0..rows {
            let row = tx.row(r);
            data.extend(idx.iter().map(|&i| row[i]));
        }
        let out = Tensor::matrix(rows, idx.len(), data)?;
        Ok(self.derived(out, Op::SelectCols(x, idx.to_vec()), &[x]))
    }

    /// Places column `c` of `x` at column `idx[c]` of a zero `rows × width`
    /// matrix (adding on collisions).
    pub fn scatter_cols(&mut self, x: Var, idx: &[usize], width: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, c) = tx.dims2();
        if c != idx.len() || idx.iter().any(|&i| i >= width) {
            return Err(Error::shape("scatter_cols", tx.shape(), &[idx.len(), width]));
        }
        let mut out = Tensor::zeros(&[rows, width]);
        for r in 0..rows {
            let src = tx.row(r).to_vec();
            let dst = out.row_mut(r);
            for (&i, v) in idx.iter().zip(src) {
                dst[i] = dst[i] + v;
            }
        }
        Ok(self.derived(out, Op::ScatterCols(x, idx.to_vec()), &[x]))
    }

    /// Broadcasts per-sample gate values to activation shape.
    ///
    /// `x` is `[batch × K]`; columns `col_start..col_start + groups` are read.
    /// The output is `[batch·rows_per × groups·width]` with
    /// `out[b·rows_per + t, g·width + w] = x[b, col_start + g]`.
    pub fn expand_gates(
        &mut self,
        x: Var,
        col_start: usize,
        groups: usize,
        rows_per: usize,
        width: usize,
    ) -> Result<Var> {
        let tx = self.value(x);
        let (batch, k) = tx.dims2();
        if col_start + groups > k {
            return Err(Error::shape("expand_gates", tx.shape(), &[col_start + groups]));
        }
        let cols = groups * width;
        let mut data = Vec::with_capacity(batch * rows_per * cols);
        for b in 0..batch {
            let gates = &tx.row(b)[col_start..col_start + groups];
            for _ in 0..rows_per {
                for &g in gates {
                    data.extend(std::iter::repeat_n(g, width));
                }
            }
        }
        let out = Tensor::matrix(batch * rows_per, cols, data)?;
        Ok(self.derived(
            out,
            Op::ExpandGates {
                x,
                col_start,
                groups,
                rows_per,
                width,
            },
            &[x],
        ))
    }

    /// Causal multi-head self-attention over `batch` independent sequences of
    /// length `seq` stacked row-wise. `q`, `k`, `v` are `[batch·seq × d]`
    /// with heads occupying contiguous column blocks.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = tq.dims2();
        if tk.shape() != tq.shape() || tv.shape() != tq.shape() || rows != batch * seq || d % heads != 0
        {
            return Err(Error::shape("attention", tq.shape(), tk.shape()));
        }
        let dh = d / heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let mut out = Tensor::zeros(&[rows, d]);
        let mut probs = vec![F::zero(); batch * heads * seq * seq];
        for b in 0..batch {
            let span = b * seq * d..(b + 1) * seq * d;
            let (qb, kb, vb) = (&tq.data()[span.clone()], &tk.data()[span.clone()], &tv.data()[span]);
            for h in 0..heads {
                for i in 0..seq {
                    let p = &mut probs[((b * heads + h) * seq + i) * seq..][..i + 1];
                    let o = &mut out.data_mut()[(b * seq + i) * d + h * dh..][..dh];
                    kernels::attention_row(
                        &qb[i * d + h * dh..][..dh],
                        kb,
                        vb,
                        d,
                        h * dh,
                        i + 1,
                        scale,
                        p,
                        o,
                    );
                }
            }
        }
        Ok(self.derived(
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            kernels::softmax_in_place(row);
        }
        self.derived(out, Op::SoftmaxRows(x), &[x])
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            let lse = kernels::log_sum_exp(row);
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        self.derived(out, Op::LogSoftmaxRows(x), &[x])
    }

    /// Mean token negative log-likelihood; a `1 × 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let loss = kernels::cross_entropy(tl, targets)?;
        let mut probs = tl.data().to_vec();
        let c = tl.cols();
        for row in probs.chunks_mut(c) {
            kernels::softmax_in_place(row);
        }
        let out = Tensor::row_vector(vec![loss]);
        Ok(self.derived(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.derived(Tensor::row_vector(vec![s]), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / F::of(t.len().max(1) as f64);
        self.derived(Tensor::row_vector(vec![s]), Op::Mean(x), &[x])
    }

    /// Forward value `hard`, backward identity into `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor<F>) -> Result<Var> {
        if hard.shape() != self.value(soft).shape() {
            return Err(Error::shape("straight_through", self.value(soft).shape(), hard.shape()));
        }
        Ok(self.derived(hard, Op::StraightThrough(soft), &[soft]))
    }

    /// Records an externally computed op.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<F>, op: Box<dyn CustomOp<F>>) -> Var {
        self.derived(value, Op::Custom(inputs.to_vec(), op), inputs)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), F::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[i];
        let out = &*node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2();
                let n = tb.cols();
                if self.nodes[a.0].needs_grad {
                    let mut ga = Tensor::zeros(ta.shape());
                    kernels::matmul_nt_acc(g.data(), tb.data(), ga.data_mut(), m, n, k);
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = Tensor::zeros(tb.shape());
                    kernels::matmul_tn_acc(ta.data(), g.data(), gb.data_mut(), m, k, n);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.nodes[bias.0].needs_grad {
                    let tb = self.value(*bias);
                    let mut gb = Tensor::zeros(tb.shape());
                    let c = g.cols();
                    for row in g.data().chunks(c) {
                        for (acc, &v) in gb.data_mut().iter_mut().zip(row) {
                            *acc = *acc + v;
                        }
                    }
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let prod = |t: &Tensor<F>| {
                    let d = g.data().iter().zip(t.data()).map(|(&x, &y)| x * y).collect();
                    Tensor::new(g.shape().to_vec(), d).expect("same shape")
                };
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, prod(tb));
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, prod(ta));
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.map(|v| v * *c)),
            Op::AddConst(x) => self.accumulate(grads, *x, g.clone()),
            Op::Gelu(x) => {
                let tx = self.value(*x);
                let d = g.data().iter().zip(tx.data()).map(|(&gv, &xv)| gv * gelu_grad_scalar(xv));
                let gx = Tensor::new(g.shape().to_vec(), d.collect()).expect("same shape");
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let d = g.data().iter().zip(out.data()).map(|(&gv, &y)| gv * y * (F::one() - y));
                let gx = Tensor::new(g.shape().to_vec(), d.collect()).expect("same shape");
                self.accumulate(grads, *x, gx);
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(&gv, &xv)| if xv > F::zero() { gv } else { F::zero() });
                let gx = Tensor::new(g.shape().to_vec(), d.collect()).expect("same shape");
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = g.cols();
                let gv = self.value(*gain).data();
                let mut ggain = vec![F::zero(); c];
                let mut gbias = vec![F::zero(); c];
                let mut gx = vec![F::zero(); g.len()];
                let n = F::of(c as f64);
                for (r, (grow, xrow)) in g.data().chunks(c).zip(xhat.chunks(c)).enumerate() {
                    let mut sum_d = F::zero();
                    let mut sum_dx = F::zero();
                    for j in 0..c {
                        ggain[j] = ggain[j] + grow[j] * xrow[j];
                        gbias[j] = gbias[j] + grow[j];
                        let dxh = grow[j] * gv[j];
                        sum_d = sum_d + dxh;
                        sum_dx = sum_dx + dxh * xrow[j];
                    }
                    let scale = inv_std[r] / n;
                    for j in 0..c {
                        let dxh = grow[j] * gv[j];
                        gx[r * c + j] = scale * (n * dxh - sum_d - xrow[j] * sum_dx);
                    }
                }
                let shape = |t: &Tensor<F>| t.shape().to_vec();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), gx).unwrap());
                let gshape = shape(self.value(*gain));
                let bshape = shape(self.value(*bias));
                self.accumulate(grads, *gain, Tensor::new(gshape, ggain).unwrap());
                self.accumulate(grads, *bias, Tensor::new(bshape, gbias).unwrap());
            }
            Op::GatherRows(x, idx) => {
                if self.nodes[x.0].needs_grad {
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    for (r, &src) in idx.iter().enumerate() {
                        let grow = g.row(r);
                        for (acc, &v) in gx.row_mut(src).iter_mut().zip(grow) {
                            *acc = *acc + v;
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    let piece = g.slice_rows(start..start + rows);
                    let piece = piece.reshape(self.value(*p).shape().to_vec()).unwrap();
                    self.accumulate(grads, *p, piece);
                    start += rows;
                }
            }
            Op::SelectCols(x, idx) => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                for r in 0..g.rows() {
                    let grow = g.row(r).to_vec();
                    let dst = gx.row_mut(r);
                    for (&c, v) in idx.iter().zip(grow) {
                        dst[c] = dst[c] + v;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ScatterCols(x, idx) => {
                let tx = self.value(*x);
                let mut gx = Tensor::zeros(tx.shape());
                for r in 0..g.rows() {
                    let grow = g.row(r);
                    for (c, &i) in idx.iter().enumerate() {
                        gx.row_mut(r)[c] = grow[i];
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ExpandGates {
                x,
                col_start,
                groups,
                rows_per,
                width,
            } => {
                let tx = self.value(*x);
                let mut gx = Tensor::zeros(tx.shape());
                let batch = tx.rows();
                for b in 0..batch {
                    for t in 0..*rows_per {
                        let grow = g.row(b * rows_per + t);
                        for gi in 0..*groups {
                            let s: F = grow[gi * width..(gi + 1) * width].iter().copied().sum();
                            let cell = &mut gx.row_mut(b)[col_start + gi];
                            *cell = *cell + s;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => self.attention_backward(g, (*q, *k, *v), (*batch, *seq, *heads), probs, grads),
            Op::SoftmaxRows(x) => {
                let c = g.cols();
                let mut gx = Vec::with_capacity(g.len());
                for (grow, yrow) in g.data().chunks(c).zip(out.data().chunks(c)) {
                    let dot: F = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    gx.extend(grow.iter().zip(yrow).map(|(&gv, &y)| y * (gv - dot)));
                }
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), gx).unwrap());
            }
            Op::LogSoftmaxRows(x) => {
                let c = g.cols();
                let mut gx = Vec::with_capacity(g.len());
                for (grow, yrow) in g.data().chunks(c).zip(out.data().chunks(c)) {
                    let total: F = grow.iter().copied().sum();
                    gx.extend(grow.iter().zip(yrow).map(|(&gv, &y)| gv - y.exp() * total));
                }
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), gx).unwrap());
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let tl = self.value(*logits);
                let c = tl.cols();
                let scale = g.data()[0] / F::of(targets.len().max(1) as f64);
                let mut gl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * c + t] = gl[r * c + t] - F::one();
                }
                for v in &mut gl {
                    *v = *v * scale;
                }
                self.accumulate(grads, *logits, Tensor::new(tl.shape().to_vec(), gl).unwrap());
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, g.data()[0]));
            }
            Op::Mean(x) => {
                let t = self.value(*x);
                let v = g.data()[0] / F::of(t.len().max(1) as f64);
                let shape = t.shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, v));
            }
            Op::StraightThrough(soft) => self.accumulate(grads, *soft, g.clone()),
            Op::Custom(inputs, op) => {
                let vals: Vec<&Tensor<F>> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = op.backward(&vals, out, g);
                for (&inp, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        self.accumulate(grads, inp, gi);
                    }
                }
            }
        }
    }

    fn attention_backward(
        &self,
        g: &Tensor<F>,
        (q, k, v): (Var, Var, Var),
        (batch, seq, heads): (usize, usize, usize),
        probs: &[F],
        grads: &mut [Option<Tensor<F>>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        let dh = d / heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let mut gq = Tensor::zeros(tq.shape());
        let mut gk = Tensor::zeros(tk.shape());
        let mut gv = Tensor::zeros(tv.shape());
        let mut dp = vec![F::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..seq {
                    let p = &probs[((b * heads + h) * seq + i) * seq..][..i + 1];
                    let row_i = (b * seq + i) * d + col;
                    let go = &g.data()[row_i..row_i + dh];
                    let mut dot = F::zero();
                    for j in 0..=i {
                        let row_j = (b * seq + j) * d + col;
                        let vj = &tv.data()[row_j..row_j + dh];
                        let s: F = go.iter().zip(vj).map(|(&a, &c)| a * c).sum();
                        dp[j] = s;
                        dot = dot + s * p[j];
                        let gvj = &mut gv.data_mut()[row_j..row_j + dh];
                        for (acc, &o) in gvj.iter_mut().zip(go) {
                            *acc = *acc + p[j] * o;
                        }
                    }
                    let qi = &tq.data()[row_i..row_i + dh];
                    for j in 0..=i {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        let row_j = (b * seq + j) * d + col;
                        let kj = &tk.data()[row_j..row_j + dh];
                        let gqi = &mut gq.data_mut()[row_i..row_i + dh];
                        for (acc, &kv) in gqi.iter_mut().zip(kj) {
                            *acc = *acc + ds * kv;
                        }
                        let gkj = &mut gk.data_mut()[row_j..row_j + dh];
                        for (acc, &qv) in gkj.iter_mut().zip(qi) {
                            *acc = *acc + ds * qv;
                        }
                    }
                }
            }
        }
        self.accumulate(grads, q, gq);
        self.accumulate(grads, k, gk);
        self.accumulate(grads, v, gv);
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not reach
    /// the loss.
    pub fn wrt(&self, v: Var, like: &Tensor<F>) -> Tensor<F> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
