// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense row-major tensors and the handful of standalone kernels the model
//! needs outside of the autodiff graph.
//!
//! Everything is generic over [`Scalar`], which is implemented for `f32`
//! (the default compute precision) and `f64` (used when verifying gradients
//! and exactness properties).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{OtterError, Result};

/// Floating-point element type.
pub trait Scalar: Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static {
    const NAME: &'static str;

    #[inline]
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite f64 converts to every Scalar")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}

/// Dense tensor with an optional gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(OtterError::Config(format!("shape {shape:?} holds {numel} elements but {} were supplied", data.len())));
        }
        Ok(Self { shape, data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![T::zero(); numel], grad: None, requires_grad: false }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![value; numel], grad: None, requires_grad: false }
    }

    /// Builds a 1-D tensor.
    pub fn vector(data: Vec<T>) -> Self {
        Self { shape: vec![data.len()], data, grad: None, requires_grad: false }
    }

    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[numel / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.last_dim()).unwrap_or(0)
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.last_dim();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient accumulator, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(OtterError::Config(format!("gradient of length {} for tensor of shape {:?}", g.len(), self.shape)));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        ensure_finite(&self.data, what)
    }

    /// Converts to another precision. Gradients are dropped.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.to_f64_lossy())).collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(self.data.iter().zip(&other.data).map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).abs()).fold(0.0, f64::max))
    }
}

pub(crate) fn ensure_finite<T: Scalar>(data: &[T], what: &str) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(OtterError::Numeric(format!("{what}: non-finite value {} at flat index {i}", data[i]))),
    }
}

// ---------------------------------------------------------------------------
// Standalone kernels
// ---------------------------------------------------------------------------

/// Numerically stable softmax of a single slice, written into `out`.
pub(crate) fn softmax_slice<T: Scalar>(x: &[T], out: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total = total + *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

/// `ln Σ exp(x)` with max subtraction.
pub(crate) fn log_sum_exp<T: Scalar>(x: &[T]) -> T {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = x.iter().map(|&v| (v - max).exp()).sum();
    max + total.ln()
}

/// Softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(OtterError::Config(format!("softmax axis {axis} for shape {shape:?}")));
    }
    x.ensure_finite("softmax input")?;
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![T::zero(); x.numel()];
    let mut line = vec![T::zero(); len];
    let mut soft = vec![T::zero(); len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for (j, slot) in line.iter_mut().enumerate() {
                *slot = x.data()[base + j * inner];
            }
            softmax_slice(&line, &mut soft);
            for (j, &v) in soft.iter().enumerate() {
                out[base + j * inner] = v;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Root-mean-square of the first `over_dims` entries of `row`, with `eps`
/// added under the root.
#[inline]
pub(crate) fn rms_row<T: Scalar>(row: &[T], over_dims: usize, eps: T) -> T {
    let mut sum_sq = T::zero();
    for &v in &row[..over_dims] {
        sum_sq = sum_sq + v * v;
    }
    (sum_sq / T::of(over_dims as f64) + eps).sqrt()
}

/// Per-row `sqrt(mean(x[..over_dims]^2) + eps)` over the last axis.
/// The result has the input shape minus its last axis.
pub fn rms<T: Scalar>(x: &Tensor<T>, over_dims: usize, eps: T) -> Result<Tensor<T>> {
    let width = x.last_dim();
    if over_dims == 0 || over_dims > width {
        return Err(OtterError::Config(format!("rms over {over_dims} dims of a last axis of size {width}")));
    }
    let out: Vec<T> = (0..x.rows()).map(|r| rms_row(x.row(r), over_dims, eps)).collect();
    let shape = x.shape()[..x.shape().len().saturating_sub(1)].to_vec();
    let t = Tensor::new(shape, out)?;
    t.ensure_finite("rms")?;
    Ok(t)
}

/// Normalizes each row by the RMS of its first `d_orig` entries and scales
/// by `gamma`. With `d_orig == width` this is the ordinary RMSNorm; both
/// cases share this arithmetic path.
pub(crate) fn rmsnorm_rows<T: Scalar>(x: &[T], width: usize, d_orig: usize, gamma: &[T], eps: T, out: &mut [T]) {
    for (row, orow) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let inv = rms_row(row, d_orig, eps).recip();
        for ((o, &v), &g) in orow.iter_mut().zip(row).zip(gamma) {
            *o = v * inv * g;
        }
    }
}

/// Mean over positions of `-log softmax(logits)[target]`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[u32]) -> Result<T> {
    let vocab = logits.last_dim();
    if logits.shape().len() != 2 || logits.rows() != targets.len() {
        return Err(OtterError::Config(format!(
            "cross_entropy expects logits [positions, vocab] matching {} targets, got {:?}",
            targets.len(),
            logits.shape()
        )));
    }
    if targets.is_empty() {
        return Err(OtterError::Input("cross_entropy over zero positions".into()));
    }
    logits.ensure_finite("cross_entropy logits")?;
    let mut total = T::zero();
    for (r, &t) in targets.iter().enumerate() {
        let t = t as usize;
        if t >= vocab {
            return Err(OtterError::Input(format!("target {t} outside vocabulary of {vocab}")));
        }
        let row = logits.row(r);
        total = total + (log_sum_exp(row) - row[t]);
    }
    Ok(total / T::of(targets.len() as f64))
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `y[n, out] = x[n, in] · w[out, in]^T (+ b)` with a left-to-right
/// accumulation order over the input axis.
pub(crate) fn linear_rows<T: Scalar>(x: &[T], n: usize, d_in: usize, w: &[T], d_out: usize, bias: Option<&[T]>, y: &mut [T]) {
    debug_assert_eq!(x.len(), n * d_in);
    debug_assert_eq!(w.len(), d_out * d_in);
    for r in 0..n {
        let xr = &x[r * d_in..(r + 1) * d_in];
        let yr = &mut y[r * d_out..(r + 1) * d_out];
        for (o, slot) in yr.iter_mut().enumerate() {
            let wr = &w[o * d_in..(o + 1) * d_in];
            let mut acc = T::zero();
            for (&a, &b) in wr.iter().zip(xr) {
                acc = acc + a * b;
            }
            *slot = match bias {
                Some(b) => acc + b[o],
                None => acc,
            };
        }
    }
}
