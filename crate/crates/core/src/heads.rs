// SPDX-License-Identifier: MIT OR Apache-2.0

//! Task heads reading the extension part `H'` of the final hidden state.
//!
//! * [`RewardHead`]: `sigmoid(W_on · H')`, a scalar in `(0, 1)`.
//! * [`GenerationHeads`]: `K` heads, head `k` producing
//!   `lm_head(W_hm[k] · H' + H_o)`. `H_o` is the original final hidden state,
//!   so with `W_hm = 0` a head reproduces the base next-token logits.

use crate::autodiff::{Graph, Var};
use crate::error::{OtterError, Result};
use crate::params::Param;
use crate::tensor::{linear_rows, sigmoid, softmax_slice, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct RewardHead<T> {
    /// `[1, d_ext]`.
    pub w: Param<T>,
}

impl<T: Scalar> RewardHead<T> {
    pub fn zeros(name: &str, d_ext: usize, group: u8) -> Self {
        Self { w: Param::owned_by(format!("{name}.reward"), Tensor::zeros(vec![1, d_ext]), group) }
    }

    pub fn width(&self) -> usize {
        self.w.tensor.last_dim()
    }

    /// Pre-sigmoid score `W_on · H'`.
    pub fn logit(&self, h_prime: &[T]) -> Result<T> {
        if h_prime.len() != self.width() {
            return Err(OtterError::Config(format!("reward head expects width {}, got {}", self.width(), h_prime.len())));
        }
        Ok(self.w.tensor.data().iter().zip(h_prime).fold(T::zero(), |acc, (&a, &b)| acc + a * b))
    }

    /// `sigmoid(W_on · H')`.
    pub fn score(&self, h_prime: &[T]) -> Result<T> {
        self.logit(h_prime).map(sigmoid)
    }

    /// Graph form: `[rows, d_ext] -> [rows, 1]` pre-sigmoid scores.
    pub fn logits_graph(g: &mut Graph<'_, T>, w: Var, h_prime: Var) -> Result<Var> {
        g.linear(h_prime, w, None)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationHeads<T> {
    /// One `[d_inp, d_ext]` matrix per head.
    pub heads: Vec<Param<T>>,
}

impl<T: Scalar> GenerationHeads<T> {
    pub fn zeros(name: &str, k: usize, d_inp: usize, d_ext: usize, group: u8) -> Result<Self> {
        if k == 0 {
            return Err(OtterError::Config("at least one generation head is required".into()));
        }
        let heads = (0..k).map(|i| Param::owned_by(format!("{name}.gen.{i}"), Tensor::zeros(vec![d_inp, d_ext]), group)).collect();
        Ok(Self { heads })
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    /// Logits of head `k` for one position.
    pub fn head_logits(&self, k: usize, h_prime: &[T], h_o: &[T], lm_head: &Tensor<T>) -> Result<Vec<T>> {
        let w = &self.heads.get(k).ok_or_else(|| OtterError::Config(format!("no generation head {k}")))?.tensor;
        let (d_inp, d_ext) = (w.shape()[0], w.shape()[1]);
        if h_prime.len() != d_ext || h_o.len() != d_inp || lm_head.last_dim() != d_inp {
            return Err(OtterError::Config(format!(
                "generation head {k}: H' width {} (want {d_ext}), H_o width {} (want {d_inp})",
                h_prime.len(),
                h_o.len()
            )));
        }
        let mut h_m = vec![T::zero(); d_inp];
        linear_rows(h_prime, 1, d_ext, w.data(), d_inp, None, &mut h_m);
        for (m, &o) in h_m.iter_mut().zip(h_o) {
            *m = *m + o;
        }
        let vocab = lm_head.rows();
        let mut logits = vec![T::zero(); vocab];
        linear_rows(&h_m, 1, d_inp, lm_head.data(), vocab, None, &mut logits);
        Ok(logits)
    }

    /// Softmax distributions of every head for one position.
    pub fn draft_distributions(&self, h_prime: &[T], h_o: &[T], lm_head: &Tensor<T>) -> Result<Vec<Vec<T>>> {
        (0..self.len())
            .map(|k| {
                let logits = self.head_logits(k, h_prime, h_o, lm_head)?;
                let mut p = vec![T::zero(); logits.len()];
                softmax_slice(&logits, &mut p);
                Ok(p)
            })
            .collect()
    }

    /// Graph form of one head over all rows.
    pub fn logits_graph(g: &mut Graph<'_, T>, w: Var, h_prime: Var, h_o: Var, lm_head: Var) -> Result<Var> {
        let h_m = g.linear(h_prime, w, None)?;
        let mixed = g.add(h_m, h_o)?;
        g.linear(mixed, lm_head, None)
    }
}
