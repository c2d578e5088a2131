// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode differentiation over a per-forward-pass operation tape.
//!
//! A [`Graph`] records every operation of one forward pass. Values of
//! parameter leaves are borrowed from the model, so building a graph does
//! not copy weights. [`Graph::backward`] walks the tape once in reverse and
//! returns the gradient of a scalar with respect to every node that
//! requires one.
//!
//! All activations are 2-D `[rows, cols]`; losses are `[1, 1]`. Fused ops
//! (RMSNorm, attention, cross-entropy) carry hand-derived backward rules,
//! which `gradcheck` verifies against central differences.

use std::borrow::Cow;

use crate::error::{OtterError, Result};
use crate::tensor::{ensure_finite, linear_rows, log_sum_exp, rms_row, rmsnorm_rows, sigmoid, softmax_slice, Scalar, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Embedding { table: Var, tokens: Vec<u32> },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    RmsNorm { x: Var, gamma: Var, d_orig: usize, eps: T },
    Rope { x: Var, table: RopeTable<T> },
    Attention { q: Var, k: Var, v: Var, batch: usize, seq_len: usize, head_dim: usize, probs: Vec<T> },
    SliceCols { x: Var, start: usize },
    SelectRows { x: Var, rows: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<Option<u32>>, probs: Vec<T>, count: usize },
    RmsGap { x: Var, d_orig: usize, eps: T },
    NegLogSigmoid(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<'a, T: Clone> {
    value: Cow<'a, [T]>,
    rows: usize,
    cols: usize,
    op: Op<T>,
    requires_grad: bool,
}

/// Cos/sin table for rotary position encoding of one `[rows, cols]` input.
#[derive(Debug, Clone)]
struct RopeTable<T> {
    seq_len: usize,
    head_dim: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> RopeTable<T> {
    fn new(seq_len: usize, head_dim: usize, theta: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(seq_len * half);
        let mut sin = Vec::with_capacity(seq_len * half);
        for pos in 0..seq_len {
            for i in 0..half {
                let freq = theta.powf(-2.0 * i as f64 / head_dim as f64);
                let angle = pos as f64 * freq;
                cos.push(T::of(angle.cos()));
                sin.push(T::of(angle.sin()));
            }
        }
        Self { seq_len, head_dim, cos, sin }
    }

    /// Rotates each `(2i, 2i+1)` pair of every head; `inverse` applies the
    /// transpose rotation (used by the backward pass).
    fn apply(&self, x: &[T], cols: usize, inverse: bool, out: &mut [T]) {
        let half = self.head_dim / 2;
        for (r, (row, orow)) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)).enumerate() {
            let pos = r % self.seq_len;
            let cos = &self.cos[pos * half..(pos + 1) * half];
            let sin = &self.sin[pos * half..(pos + 1) * half];
            for (head, ohead) in row.chunks_exact(self.head_dim).zip(orow.chunks_exact_mut(self.head_dim)) {
                for i in 0..half {
                    let (a, b) = (head[2 * i], head[2 * i + 1]);
                    let (c, s) = (cos[i], if inverse { -sin[i] } else { sin[i] });
                    ohead[2 * i] = a * c - b * s;
                    ohead[2 * i + 1] = a * s + b * c;
                }
            }
        }
    }
}

/// Tape for one forward pass.
#[derive(Debug, Default)]
pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, [T]>, rows: usize, cols: usize, op: Op<T>, requires_grad: bool) -> Result<Var> {
        debug_assert_eq!(value.len(), rows * cols);
        ensure_finite(&value, op_name(&op))?;
        self.nodes.push(Node { value, rows, cols, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Copies a node's value out as a `[rows, cols]` tensor.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(vec![n.rows, n.cols], n.value.to_vec()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Registers a tensor as a leaf without copying it. Tensors of rank
    /// other than 2 are viewed as `[rows, last_dim]`.
    pub fn leaf(&mut self, t: &'a Tensor<T>, requires_grad: bool) -> Result<Var> {
        let cols = t.last_dim();
        self.push(Cow::Borrowed(t.data()), t.rows(), cols, Op::Leaf, requires_grad)
    }

    /// Registers an owned `[rows, cols]` leaf.
    pub fn constant(&mut self, data: Vec<T>, rows: usize, cols: usize) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(OtterError::Config(format!("constant of {} values for [{rows}, {cols}]", data.len())));
        }
        self.push(Cow::Owned(data), rows, cols, Op::Leaf, false)
    }

    /// Owned leaf that receives a gradient (used by tests and the gradient checker).
    pub fn variable(&mut self, data: Vec<T>, rows: usize, cols: usize) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(OtterError::Config(format!("variable of {} values for [{rows}, {cols}]", data.len())));
        }
        self.push(Cow::Owned(data), rows, cols, Op::Leaf, true)
    }

    // -----------------------------------------------------------------------
    // Operations
    // -----------------------------------------------------------------------

    /// Gathers rows of `table` (`[vocab, width]`).
    pub fn embedding(&mut self, table: Var, tokens: &[u32]) -> Result<Var> {
        let (vocab, width) = self.dims(table);
        let mut out = Vec::with_capacity(tokens.len() * width);
        let tv = self.value(table);
        for &t in tokens {
            let t = t as usize;
            if t >= vocab {
                return Err(OtterError::Input(format!("token {t} outside vocabulary of {vocab}")));
            }
            out.extend_from_slice(&tv[t * width..(t + 1) * width]);
        }
        let rg = self.rg(table);
        self.push(Cow::Owned(out), tokens.len(), width, Op::Embedding { table, tokens: tokens.to_vec() }, rg)
    }

    /// `x · w^T + b` with `w` stored as `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, d_in) = self.dims(x);
        let (d_out, w_in) = self.dims(w);
        if w_in != d_in {
            return Err(OtterError::Config(format!("linear: input width {d_in} but weight is [{d_out}, {w_in}]")));
        }
        if let Some(b) = b {
            if self.dims(b).0 * self.dims(b).1 != d_out {
                return Err(OtterError::Config(format!("linear: bias length does not match {d_out} outputs")));
            }
        }
        let mut y = vec![T::zero(); n * d_out];
        linear_rows(self.value(x), n, d_in, self.value(w), d_out, b.map(|b| self.value(b)), &mut y);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Cow::Owned(y), n, d_out, Op::Linear { x, w, b }, rg)
    }

    fn same_dims(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(OtterError::Config(format!("{what}: shapes {da:?} and {db:?} differ")));
        }
        Ok(da)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims(a, b, "add")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(v), r, c, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims(a, b, "sub")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(v), r, c, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims(a, b, "mul")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(v), r, c, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let (r, k) = self.dims(a);
        let v = self.value(a).iter().map(|&x| x * c).collect();
        let rg = self.rg(a);
        self.push(Cow::Owned(v), r, k, Op::Scale(a, c), rg)
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let v = self.value(a).iter().map(|&x| x * sigmoid(x)).collect();
        let rg = self.rg(a);
        self.push(Cow::Owned(v), r, c, Op::Silu(a), rg)
    }

    /// RMSNorm whose denominator only reads the first `d_orig` columns.
    pub fn rmsnorm(&mut self, x: Var, gamma: Var, d_orig: usize, eps: T) -> Result<Var> {
        let (n, width) = self.dims(x);
        let (gr, gc) = self.dims(gamma);
        if gr * gc != width {
            return Err(OtterError::Config(format!("rmsnorm: gamma length {} for width {width}", gr * gc)));
        }
        if d_orig == 0 || d_orig > width {
            return Err(OtterError::Config(format!("rmsnorm: d_orig {d_orig} for width {width}")));
        }
        let mut y = vec![T::zero(); n * width];
        rmsnorm_rows(self.value(x), width, d_orig, self.value(gamma), eps, &mut y);
        let rg = self.rg(x) || self.rg(gamma);
        self.push(Cow::Owned(y), n, width, Op::RmsNorm { x, gamma, d_orig, eps }, rg)
    }

    /// Rotary position encoding; row `r` sits at position `r % seq_len`.
    pub fn rope(&mut self, x: Var, seq_len: usize, head_dim: usize, theta: f64) -> Result<Var> {
        let (n, cols) = self.dims(x);
        if head_dim == 0 || !head_dim.is_multiple_of(2) || cols % head_dim != 0 || seq_len == 0 || n % seq_len != 0 {
            return Err(OtterError::Config(format!("rope: [{n}, {cols}] with head_dim {head_dim} and seq_len {seq_len}")));
        }
        let table = RopeTable::new(seq_len, head_dim, theta);
        let mut y = vec![T::zero(); n * cols];
        table.apply(self.value(x), cols, false, &mut y);
        let rg = self.rg(x);
        self.push(Cow::Owned(y), n, cols, Op::Rope { x, table }, rg)
    }

    /// Causal scaled dot-product attention. `q`, `k`, `v` are
    /// `[batch * seq_len, heads * head_dim]`; heads are contiguous column blocks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq_len: usize, head_dim: usize) -> Result<Var> {
        let (n, cols) = self.same_dims(q, k, "attention q/k")?;
        self.same_dims(q, v, "attention q/v")?;
        if n != batch * seq_len || head_dim == 0 || cols % head_dim != 0 {
            return Err(OtterError::Config(format!("attention: [{n}, {cols}] for batch {batch}, seq_len {seq_len}, head_dim {head_dim}")));
        }
        let heads = cols / head_dim;
        let scale = T::of(1.0 / (head_dim as f64).sqrt());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); batch * heads * seq_len * seq_len];
        let mut out = vec![T::zero(); n * cols];
        let mut scores = vec![T::zero(); seq_len];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * head_dim;
                for t in 0..seq_len {
                    let qrow = &qv[(b * seq_len + t) * cols + off..][..head_dim];
                    for (u, s) in scores[..=t].iter_mut().enumerate() {
                        let krow = &kv[(b * seq_len + u) * cols + off..][..head_dim];
                        let mut acc = T::zero();
                        for (&a, &c) in qrow.iter().zip(krow) {
                            acc = acc + a * c;
                        }
                        *s = acc * scale;
                    }
                    let p = &mut probs[((b * heads + h) * seq_len + t) * seq_len..][..=t];
                    softmax_slice(&scores[..=t], p);
                    let orow = &mut out[(b * seq_len + t) * cols + off..][..head_dim];
                    for (u, &pu) in p.iter().enumerate() {
                        let vrow = &vv[(b * seq_len + u) * cols + off..][..head_dim];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o = *o + pu * x;
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(Cow::Owned(out), n, cols, Op::Attention { q, k, v, batch, seq_len, head_dim, probs }, rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, cols) = self.dims(x);
        if start + len > cols {
            return Err(OtterError::Config(format!("slice_cols {start}..{} of width {cols}", start + len)));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&xv[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(x);
        self.push(Cow::Owned(out), n, len, Op::SliceCols { x, start }, rg)
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, cols) = self.dims(x);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n {
                return Err(OtterError::Config(format!("select_rows: row {r} of {n}")));
            }
            out.extend_from_slice(&xv[r * cols..(r + 1) * cols]);
        }
        let rg = self.rg(x);
        self.push(Cow::Owned(out), rows.len(), cols, Op::SelectRows { x, rows: rows.to_vec() }, rg)
    }

    /// Mean cross-entropy over the rows that have a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<u32>]) -> Result<Var> {
        let (n, vocab) = self.dims(logits);
        if targets.len() != n {
            return Err(OtterError::Config(format!("cross_entropy: {} targets for {n} rows", targets.len())));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(OtterError::Input("cross_entropy: no row has a target".into()));
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); n * vocab];
        let mut total = T::zero();
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let t = t as usize;
            if t >= vocab {
                return Err(OtterError::Input(format!("target {t} outside vocabulary of {vocab}")));
            }
            let row = &lv[r * vocab..(r + 1) * vocab];
            total = total + (log_sum_exp(row) - row[t]);
            softmax_slice(row, &mut probs[r * vocab..(r + 1) * vocab]);
        }
        let loss = total / T::of(count as f64);
        let rg = self.rg(logits);
        self.push(Cow::Owned(vec![loss]), 1, 1, Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count }, rg)
    }

    /// Row-mean of `(rms(x[..d_orig]) - rms(x))^2`.
    pub fn rms_gap(&mut self, x: Var, d_orig: usize, eps: T) -> Result<Var> {
        let (n, width) = self.dims(x);
        if d_orig == 0 || d_orig > width || n == 0 {
            return Err(OtterError::Config(format!("rms_gap: d_orig {d_orig} for [{n}, {width}]")));
        }
        let xv = self.value(x);
        let mut total = T::zero();
        for row in xv.chunks_exact(width) {
            let gap = rms_row(row, d_orig, eps) - rms_row(row, width, eps);
            total = total + gap * gap;
        }
        let v = total / T::of(n as f64);
        let rg = self.rg(x);
        self.push(Cow::Owned(vec![v]), 1, 1, Op::RmsGap { x, d_orig, eps }, rg)
    }

    /// Elementwise `-ln sigmoid(x) = ln(1 + e^{-x})`.
    pub fn neg_log_sigmoid(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let v = self
            .value(a)
            .iter()
            .map(|&x| {
                // softplus(-x), stable for both signs
                let m = -x;
                m.max(T::zero()) + (-(m.abs())).exp().ln_1p()
            })
            .collect();
        let rg = self.rg(a);
        self.push(Cow::Owned(v), r, c, Op::NegLogSigmoid(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let vals = self.value(a);
        if vals.is_empty() {
            return Err(OtterError::Input("mean of an empty tensor".into()));
        }
        let m = vals.iter().copied().sum::<T>() / T::of(vals.len() as f64);
        let rg = self.rg(a);
        self.push(Cow::Owned(vec![m]), 1, 1, Op::Mean(a), rg)
    }

    /// Sum of same-shaped nodes (left fold of `add`).
    pub fn sum_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars.split_first().ok_or_else(|| OtterError::Input("sum of zero terms".into()))?;
        let mut acc = first;
        for &v in rest {
            acc = self.add(acc, v)?;
        }
        Ok(acc)
    }

    // -----------------------------------------------------------------------
    // Backward
    // -----------------------------------------------------------------------

    /// Gradient of the scalar `loss` with respect to every node that requires it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ln = &self.nodes[loss.0];
        if ln.rows * ln.cols != 1 {
            return Err(OtterError::Config(format!("backward from a [{}, {}] node", ln.rows, ln.cols)));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if !ln.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(gy);
                    continue;
                }
                Op::Embedding { table, tokens } => {
                    if self.rg(*table) {
                        let (vocab, width) = self.dims(*table);
                        let g = slot(&mut grads, *table, vocab * width);
                        for (r, &t) in tokens.iter().enumerate() {
                            let t = t as usize;
                            for (dst, &src) in g[t * width..(t + 1) * width].iter_mut().zip(&gy[r * width..(r + 1) * width]) {
                                *dst = *dst + src;
                            }
                        }
                    }
                }
                Op::Linear { x, w, b } => self.linear_backward(&mut grads, &gy, *x, *w, *b),
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.rg(v) {
                            axpy(slot(&mut grads, v, gy.len()), T::one(), &gy);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        axpy(slot(&mut grads, *a, gy.len()), T::one(), &gy);
                    }
                    if self.rg(*b) {
                        axpy(slot(&mut grads, *b, gy.len()), -T::one(), &gy);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let bv = self.value(*b);
                        let g = slot(&mut grads, *a, gy.len());
                        for ((d, &u), &w) in g.iter_mut().zip(&gy).zip(bv) {
                            *d = *d + u * w;
                        }
                    }
                    if self.rg(*b) {
                        let av = self.value(*a);
                        let g = slot(&mut grads, *b, gy.len());
                        for ((d, &u), &w) in g.iter_mut().zip(&gy).zip(av) {
                            *d = *d + u * w;
                        }
                    }
                }
                Op::Scale(a, c) => {
                    if self.rg(*a) {
                        axpy(slot(&mut grads, *a, gy.len()), *c, &gy);
                    }
                }
                Op::Silu(a) => {
                    if self.rg(*a) {
                        let av = self.value(*a);
                        let g = slot(&mut grads, *a, gy.len());
                        for ((d, &u), &x) in g.iter_mut().zip(&gy).zip(av) {
                            let s = sigmoid(x);
                            *d = *d + u * s * (T::one() + x * (T::one() - s));
                        }
                    }
                }
                Op::RmsNorm { x, gamma, d_orig, eps } => self.rmsnorm_backward(&mut grads, &gy, *x, *gamma, *d_orig, *eps),
                Op::Rope { x, table } => {
                    if self.rg(*x) {
                        let (_, cols) = self.dims(*x);
                        let mut dx = vec![T::zero(); gy.len()];
                        table.apply(&gy, cols, true, &mut dx);
                        axpy(slot(&mut grads, *x, gy.len()), T::one(), &dx);
                    }
                }
                Op::Attention { q, k, v, batch, seq_len, head_dim, probs } => {
                    self.attention_backward(&mut grads, &gy, (*q, *k, *v), *batch, *seq_len, *head_dim, probs)
                }
                Op::SliceCols { x, start } => {
                    if self.rg(*x) {
                        let (n, cols) = self.dims(*x);
                        let len = node.cols;
                        let g = slot(&mut grads, *x, n * cols);
                        for r in 0..n {
                            for j in 0..len {
                                g[r * cols + start + j] = g[r * cols + start + j] + gy[r * len + j];
                            }
                        }
                    }
                }
                Op::SelectRows { x, rows } => {
                    if self.rg(*x) {
                        let (n, cols) = self.dims(*x);
                        let g = slot(&mut grads, *x, n * cols);
                        for (i, &r) in rows.iter().enumerate() {
                            for j in 0..cols {
                                g[r * cols + j] = g[r * cols + j] + gy[i * cols + j];
                            }
                        }
                    }
                }
                Op::CrossEntropy { logits, targets, probs, count } => {
                    if self.rg(*logits) {
                        let (n, vocab) = self.dims(*logits);
                        let scale = gy[0] / T::of(*count as f64);
                        let g = slot(&mut grads, *logits, n * vocab);
                        for (r, t) in targets.iter().enumerate() {
                            let Some(t) = *t else { continue };
                            let row = &mut g[r * vocab..(r + 1) * vocab];
                            for (j, d) in row.iter_mut().enumerate() {
                                let onehot = if j == t as usize { T::one() } else { T::zero() };
                                *d = *d + scale * (probs[r * vocab + j] - onehot);
                            }
                        }
                    }
                }
                Op::RmsGap { x, d_orig, eps } => {
                    if self.rg(*x) {
                        let (n, width) = self.dims(*x);
                        let xv = self.value(*x);
                        let g = slot(&mut grads, *x, n * width);
                        let nf = T::of(n as f64);
                        let (df, wf) = (T::of(*d_orig as f64), T::of(width as f64));
                        let two = T::of(2.0);
                        for (row, grow) in xv.chunks_exact(width).zip(g.chunks_exact_mut(width)) {
                            let a = rms_row(row, *d_orig, *eps);
                            let b = rms_row(row, width, *eps);
                            let coef = gy[0] * two * (a - b) / nf;
                            for (j, (d, &xj)) in grow.iter_mut().zip(row).enumerate() {
                                let mut dj = -xj / (wf * b);
                                if j < *d_orig {
                                    dj = dj + xj / (df * a);
                                }
                                *d = *d + coef * dj;
                            }
                        }
                    }
                }
                Op::NegLogSigmoid(a) => {
                    if self.rg(*a) {
                        let av = self.value(*a);
                        let g = slot(&mut grads, *a, gy.len());
                        for ((d, &u), &x) in g.iter_mut().zip(&gy).zip(av) {
                            *d = *d + u * (sigmoid(x) - T::one());
                        }
                    }
                }
                Op::Mean(a) => {
                    if self.rg(*a) {
                        let len = self.value(*a).len();
                        let c = gy[0] / T::of(len as f64);
                        for d in slot(&mut grads, *a, len).iter_mut() {
                            *d = *d + c;
                        }
                    }
                }
            }
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                ensure_finite(g, &format!("gradient of node {i}"))?;
            }
        }
        Ok(Gradients { grads })
    }

    fn linear_backward(&self, grads: &mut [Option<Vec<T>>], gy: &[T], x: Var, w: Var, b: Option<Var>) {
        let (n, d_in) = self.dims(x);
        let (d_out, _) = self.dims(w);
        if self.rg(x) {
            let wv = self.value(w);
            let g = slot(grads, x, n * d_in);
            for r in 0..n {
                let grow = &mut g[r * d_in..(r + 1) * d_in];
                for o in 0..d_out {
                    let u = gy[r * d_out + o];
                    if u == T::zero() {
                        continue;
                    }
                    for (d, &wv) in grow.iter_mut().zip(&wv[o * d_in..(o + 1) * d_in]) {
                        *d = *d + u * wv;
                    }
                }
            }
        }
        if self.rg(w) {
            let xv = self.value(x);
            let g = slot(grads, w, d_out * d_in);
            for r in 0..n {
                let xr = &xv[r * d_in..(r + 1) * d_in];
                for o in 0..d_out {
                    let u = gy[r * d_out + o];
                    if u == T::zero() {
                        continue;
                    }
                    for (d, &xv) in g[o * d_in..(o + 1) * d_in].iter_mut().zip(xr) {
                        *d = *d + u * xv;
                    }
                }
            }
        }
        if let Some(b) = b {
            if self.rg(b) {
                let g = slot(grads, b, d_out);
                for r in 0..n {
                    for (d, &u) in g.iter_mut().zip(&gy[r * d_out..(r + 1) * d_out]) {
                        *d = *d + u;
                    }
                }
            }
        }
    }

    fn rmsnorm_backward(&self, grads: &mut [Option<Vec<T>>], gy: &[T], x: Var, gamma: Var, d_orig: usize, eps: T) {
        let (n, width) = self.dims(x);
        let xv = self.value(x);
        let gv = self.value(gamma);
        let df = T::of(d_orig as f64);
        if self.rg(gamma) {
            let g = slot(grads, gamma, width);
            for (row, grow) in xv.chunks_exact(width).zip(gy.chunks_exact(width)) {
                let inv = rms_row(row, d_orig, eps).recip();
                for ((d, &xj), &u) in g.iter_mut().zip(row).zip(grow) {
                    *d = *d + u * xj * inv;
                }
            }
        }
        if self.rg(x) {
            let g = slot(grads, x, n * width);
            for ((row, grow), dx) in xv.chunks_exact(width).zip(gy.chunks_exact(width)).zip(g.chunks_exact_mut(width)) {
                let inv = rms_row(row, d_orig, eps).recip();
                let mut s = T::zero();
                for ((&u, &gj), &xj) in grow.iter().zip(gv).zip(row) {
                    s = s + u * gj * xj;
                }
                let k = s * inv * inv * inv / df;
                for (j, ((d, &u), &gj)) in dx.iter_mut().zip(grow).zip(gv).enumerate() {
                    let mut v = u * gj * inv;
                    if j < d_orig {
                        v = v - row[j] * k;
                    }
                    *d = *d + v;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        grads: &mut [Option<Vec<T>>],
        gy: &[T],
        (q, k, v): (Var, Var, Var),
        batch: usize,
        seq_len: usize,
        head_dim: usize,
        probs: &[T],
    ) {
        let (n, cols) = self.dims(q);
        let heads = cols / head_dim;
        let scale = T::of(1.0 / (head_dim as f64).sqrt());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut dq = vec![T::zero(); n * cols];
        let mut dk = vec![T::zero(); n * cols];
        let mut dv = vec![T::zero(); n * cols];
        let mut dp = vec![T::zero(); seq_len];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * head_dim;
                for t in 0..seq_len {
                    let p = &probs[((b * heads + h) * seq_len + t) * seq_len..][..=t];
                    let go = &gy[(b * seq_len + t) * cols + off..][..head_dim];
                    let mut dot = T::zero();
                    for (u, &pu) in p.iter().enumerate() {
                        let ubase = (b * seq_len + u) * cols + off;
                        let vrow = &vv[ubase..ubase + head_dim];
                        let mut acc = T::zero();
                        for (&a, &c) in go.iter().zip(vrow) {
                            acc = acc + a * c;
                        }
                        dp[u] = acc;
                        dot = dot + pu * acc;
                        for (d, &g) in dv[ubase..ubase + head_dim].iter_mut().zip(go) {
                            *d = *d + pu * g;
                        }
                    }
                    let tbase = (b * seq_len + t) * cols + off;
                    for (u, &pu) in p.iter().enumerate() {
                        let ds = pu * (dp[u] - dot) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let ubase = (b * seq_len + u) * cols + off;
                        for j in 0..head_dim {
                            dq[tbase + j] = dq[tbase + j] + ds * kv[ubase + j];
                            dk[ubase + j] = dk[ubase + j] + ds * qv[tbase + j];
                        }
                    }
                }
            }
        }
        for (var, d) in [(q, dq), (k, dk), (v, dv)] {
            if self.rg(var) {
                axpy(slot(grads, var, n * cols), T::one(), &d);
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn axpy<T: Scalar>(dst: &mut [T], a: T, src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + a * s;
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Embedding { .. } => "embedding",
        Op::Linear { .. } => "linear",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Silu(..) => "silu",
        Op::RmsNorm { .. } => "rmsnorm",
        Op::Rope { .. } => "rope",
        Op::Attention { .. } => "attention",
        Op::SliceCols { .. } => "slice_cols",
        Op::SelectRows { .. } => "select_rows",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::RmsGap { .. } => "rms_gap",
        Op::NegLogSigmoid(..) => "neg_log_sigmoid",
        Op::Mean(..) => "mean",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_forward_matches_hand_product() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(vec![2.0, 3.0], 1, 2).unwrap();
        let w = g.constant(vec![1.0, 0.0, 0.5, 1.0], 2, 2).unwrap();
        let y = g.linear(x, w, None).unwrap();
        assert_eq!(g.value(y), &[2.0, 4.0]);
    }

    #[test]
    fn single_position_attention_returns_values() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(vec![0.3, -1.0, 2.0, 0.5], 1, 4).unwrap();
        let k = g.constant(vec![1.0, 2.0, -3.0, 0.1], 1, 4).unwrap();
        let v = g.constant(vec![7.0, 8.0, 9.0, 10.0], 1, 4).unwrap();
        let o = g.attention(q, k, v, 1, 1, 2).unwrap();
        assert_eq!(g.value(o), &[7.0, 8.0, 9.0, 10.0]);
    }

    #[test]
    fn two_token_attention_hand_values() {
        // one head of width 1: q = [1, 2], k = [1, 3], v = [10, 20]
        let mut g = Graph::<f64>::new();
        let q = g.constant(vec![1.0, 2.0], 2, 1).unwrap();
        let k = g.constant(vec![1.0, 3.0], 2, 1).unwrap();
        let v = g.constant(vec![10.0, 20.0], 2, 1).unwrap();
        let o = g.attention(q, k, v, 1, 2, 1).unwrap();
        // position 1 scores: 2*1 = 2 and 2*3 = 6
        let p1 = 1.0 / (1.0 + (4.0f64).exp());
        let expected1 = p1 * 10.0 + (1.0 - p1) * 20.0;
        assert_eq!(g.value(o)[0], 10.0);
        assert!((g.value(o)[1] - expected1).abs() < 1e-12);
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(vec![1.0, 2.0, 3.0, 4.0], 1, 4).unwrap();
        let y = g.rope(x, 1, 4, 10_000.0).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn rope_preserves_pair_norms() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(vec![1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0], 2, 4).unwrap();
        let y = g.rope(x, 2, 4, 10_000.0).unwrap();
        let v = g.value(y);
        let n = |a: f64, b: f64| (a * a + b * b).sqrt();
        assert!((n(v[4], v[5]) - n(1.0, 2.0)).abs() < 1e-12);
        assert!((n(v[6], v[7]) - n(3.0, 4.0)).abs() < 1e-12);
        assert!((v[4] - 1.0).abs() > 1e-3);
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut g = Graph::<f32>::new();
        assert!(matches!(g.constant(vec![f32::INFINITY], 1, 1), Err(OtterError::Numeric(_))));
        let a = g.constant(vec![f32::MAX], 1, 1).unwrap();
        assert!(matches!(g.add(a, a), Err(OtterError::Numeric(_))));
    }

    #[test]
    fn neg_log_sigmoid_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(vec![0.0, 2.0, -800.0, 800.0], 1, 4).unwrap();
        let y = g.neg_log_sigmoid(x).unwrap();
        let v = g.value(y);
        assert!((v[0] - 2f64.ln()).abs() < 1e-12);
        assert!((v[1] - 0.12693).abs() < 1e-5);
        assert!((v[2] - 800.0).abs() < 1e-9);
        assert!(v[3] < 1e-300);
    }

    #[test]
    fn embedding_rejects_out_of_vocab() {
        let t = Tensor::<f32>::zeros(vec![4, 2]);
        let mut g = Graph::new();
        let tv = g.leaf(&t, false).unwrap();
        assert!(matches!(g.embedding(tv, &[4]), Err(OtterError::Input(_))));
    }

    #[test]
    fn backward_of_mul_and_sum() {
        let mut g = Graph::<f64>::new();
        let a = g.variable(vec![1.0, 2.0], 1, 2).unwrap();
        let b = g.variable(vec![3.0, 4.0], 1, 2).unwrap();
        let p = g.mul(a, b).unwrap();
        let m = g.mean(p).unwrap();
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[1.5, 2.0]);
        assert_eq!(grads.get(b).unwrap(), &[0.5, 1.0]);
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(vec![1.0, 2.0], 1, 2).unwrap();
        let b = g.variable(vec![3.0, 4.0], 1, 2).unwrap();
        let p = g.mul(a, b).unwrap();
        let m = g.mean(p).unwrap();
        let grads = g.backward(m).unwrap();
        assert!(grads.get(a).is_none());
        assert!(grads.get(b).is_some());
    }
}
