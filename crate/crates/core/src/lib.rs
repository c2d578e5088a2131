// SPDX-License-Identifier: MIT OR Apache-2.0

// `!(x <= tol)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod heads;
pub mod otter;
pub mod params;
pub mod tensor;
pub mod training;
pub mod transformer;
