// SPDX-License-Identifier: MIT OR Apache-2.0

//! TopK sparse autoencoders for multimodal model activations.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod attribution;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod exchange;
pub mod host;
pub mod interpret;
pub mod linalg;
pub mod mask;
pub mod pipeline;
pub mod sae;
pub mod service;
pub mod store;
pub mod synth;
pub mod toyworld;
pub mod trainer;

mod binio;

pub use error::{Error, Result};
pub use sae::{LatentState, SaeParams, SparseVec, SteerSpec, TokenSet};
