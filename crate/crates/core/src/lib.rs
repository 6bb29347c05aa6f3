//! Conditional prototype rectification over frozen vision-language embeddings.
//!
//! A cross-attention CoAdapter turns each query feature into sample-specific
//! residuals that shift the textual class prototypes; nearest-neighbor
//! rectification then mixes every prototype with unlabeled features close to
//! it. All trainable tensors are optimized through a small reverse-mode tape
//! whose gradients are checked against central finite differences.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod benchmark;
pub mod checkpoint;
pub mod coadapter;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nnr;
pub mod numerics;
pub mod parallel;
pub mod promptenc;
pub mod prototypes;
pub mod trainer;

pub use error::{CprError, Result};
pub use parallel::Exec;
