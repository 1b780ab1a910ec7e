// SPDX-License-Identifier: MIT OR Apache-2.0

//! # sae-lab
//!
//! Sparse autoencoders (SAEs) over transformer residual-stream activations:
//! training, evaluation, feature steering against a vocabulary-embedding
//! head, and feature suppression for group-robust classification. A small
//! seeded vision transformer and synthetic datasets make every procedure
//! runnable on a laptop.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod activation_store;
pub mod error;
pub mod eval;
pub mod sae;
pub mod steering;
pub mod suppression;
pub mod toy;

pub use error::{Error, Result};
