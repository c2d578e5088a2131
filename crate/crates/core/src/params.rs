// SPDX-License-Identifier: MIT OR Apache-2.0

//! Named parameters with per-element ownership.
//!
//! Every element of a parameter belongs to one *group*: group 0 is the base
//! model and group `g > 0` is the `g`-th inserted extension. Elements that
//! must stay zero forever carry [`STRUCTURAL_ZERO`] instead of a group.
//!
//! Block rule for a matrix `W[out, in]` whose axes are split into groups:
//! element `(r, c)` with row group `gr` and column group `gc` is a
//! structural zero when `gc > gr` and is owned by `gr` otherwise. With two
//! groups this gives the layout `[[W, 0], [A, B]]`.

use serde::{Deserialize, Serialize};

use crate::error::{OtterError, Result};
use crate::tensor::{Scalar, Tensor};

/// Owner tag of elements that are fixed at zero.
pub const STRUCTURAL_ZERO: u8 = u8::MAX;

/// Widths of each group along the three extendable axes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupWidths {
    /// Residual-stream width per group (`d_inp`, then each `d_ext`).
    pub hidden: Vec<usize>,
    /// FFN inner width per group.
    pub inner: Vec<usize>,
    /// Attention heads per group.
    pub heads: Vec<usize>,
}

impl GroupWidths {
    pub fn base(d_inp: usize, d_inner: usize, n_heads: usize) -> Self {
        Self { hidden: vec![d_inp], inner: vec![d_inner], heads: vec![n_heads] }
    }

    pub fn groups(&self) -> usize {
        self.hidden.len()
    }

    pub fn hidden_total(&self) -> usize {
        self.hidden.iter().sum()
    }

    pub fn inner_total(&self) -> usize {
        self.inner.iter().sum()
    }

    pub fn heads_total(&self) -> usize {
        self.heads.iter().sum()
    }

    /// Offset of group `g` along the hidden axis.
    pub fn hidden_offset(&self, g: usize) -> usize {
        self.hidden[..g].iter().sum()
    }

    /// Head widths in columns (`heads * head_dim`) per group.
    pub fn head_cols(&self, head_dim: usize) -> Vec<usize> {
        self.heads.iter().map(|h| h * head_dim).collect()
    }

    pub fn push(&mut self, hidden: usize, inner: usize, heads: usize) {
        self.hidden.push(hidden);
        self.inner.push(inner);
        self.heads.push(heads);
    }

    pub fn pop(&mut self) {
        self.hidden.pop();
        self.inner.pop();
        self.heads.pop();
    }
}

/// Maps each index along an axis to its group.
pub(crate) fn group_of_index(groups: &[usize]) -> Vec<u8> {
    groups.iter().enumerate().flat_map(|(g, &n)| std::iter::repeat_n(g as u8, n)).collect()
}

/// Owners for a `[sum(out), sum(in)]` matrix under the block rule.
pub(crate) fn block_owner(out_groups: &[usize], in_groups: &[usize]) -> Vec<u8> {
    let rows = group_of_index(out_groups);
    let cols = group_of_index(in_groups);
    let mut owner = Vec::with_capacity(rows.len() * cols.len());
    for &gr in &rows {
        for &gc in &cols {
            owner.push(if gc > gr { STRUCTURAL_ZERO } else { gr });
        }
    }
    owner
}

/// Owners for a `[rows, sum(cols)]` table whose columns carry the groups
/// (token embeddings).
pub(crate) fn column_owner(rows: usize, col_groups: &[usize]) -> Vec<u8> {
    let cols = group_of_index(col_groups);
    (0..rows).flat_map(|_| cols.iter().copied()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub owner: Vec<u8>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>, owner: Vec<u8>) -> Result<Self> {
        let name = name.into();
        if owner.len() != tensor.numel() {
            return Err(OtterError::Config(format!("parameter `{name}`: {} owner tags for {} elements", owner.len(), tensor.numel())));
        }
        Ok(Self { name, tensor, owner })
    }

    /// Parameter fully owned by one group.
    pub fn owned_by(name: impl Into<String>, tensor: Tensor<T>, group: u8) -> Self {
        let owner = vec![group; tensor.numel()];
        Self { name: name.into(), tensor, owner }
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }

    pub fn has_group(&self, group: usize) -> bool {
        self.owner.iter().any(|&o| o as usize == group && o != STRUCTURAL_ZERO)
    }

    pub fn count_owned(&self, group: usize) -> usize {
        self.owner.iter().filter(|&&o| o != STRUCTURAL_ZERO && o as usize == group).count()
    }

    pub fn count_zero(&self) -> usize {
        self.owner.iter().filter(|&&o| o == STRUCTURAL_ZERO).count()
    }

    pub fn trainable_mask(&self, group: Option<usize>) -> Vec<bool> {
        match group {
            None => vec![false; self.owner.len()],
            Some(g) => self.owner.iter().map(|&o| o != STRUCTURAL_ZERO && o as usize == g).collect(),
        }
    }

    /// Flat indices of structural-zero elements that are not exactly zero.
    pub fn zero_violations(&self) -> Vec<usize> {
        self.owner
            .iter()
            .zip(self.tensor.data())
            .enumerate()
            .filter(|(_, (&o, &v))| o == STRUCTURAL_ZERO && v != T::zero())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn rezero(&mut self) {
        let owner = &self.owner;
        for (v, &o) in self.tensor.data_mut().iter_mut().zip(owner) {
            if o == STRUCTURAL_ZERO {
                *v = T::zero();
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> Param<U> {
        Param { name: self.name.clone(), tensor: self.tensor.cast(), owner: self.owner.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_group_block_layout() {
        // out groups [1, 1], in groups [1, 1] -> [[W, 0], [A, B]]
        let o = block_owner(&[1, 1], &[1, 1]);
        assert_eq!(o, vec![0, STRUCTURAL_ZERO, 1, 1]);
    }

    #[test]
    fn three_group_layout_is_lower_block_triangular() {
        let o = block_owner(&[1, 1, 1], &[1, 1, 1]);
        let z = STRUCTURAL_ZERO;
        assert_eq!(o, vec![0, z, z, 1, 1, z, 2, 2, 2]);
    }

    #[test]
    fn empty_groups_are_allowed() {
        let o = block_owner(&[2, 0], &[1, 1]);
        assert_eq!(o, vec![0, STRUCTURAL_ZERO, 0, STRUCTURAL_ZERO]);
        let o = block_owner(&[1, 1], &[1, 0]);
        assert_eq!(o, vec![0, 1]);
    }

    #[test]
    fn column_groups_for_embeddings() {
        assert_eq!(column_owner(2, &[1, 2]), vec![0, 1, 1, 0, 1, 1]);
    }

    #[test]
    fn violations_and_rezero() {
        let t = Tensor::<f32>::new(vec![2, 2], vec![1.0, 0.5, 2.0, 3.0]).unwrap();
        let mut p = Param::new("w", t, block_owner(&[1, 1], &[1, 1])).unwrap();
        assert_eq!(p.zero_violations(), vec![1]);
        p.rezero();
        assert!(p.zero_violations().is_empty());
        assert_eq!(p.trainable_mask(Some(1)), vec![false, false, true, true]);
        assert_eq!(p.count_owned(0), 1);
        assert_eq!(p.count_zero(), 1);
    }
}
