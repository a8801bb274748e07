//! Side-information co-training for long-tailed recognition.
//!
//! A shared classifier is trained on two views of each sample: the visual
//! feature `x_v` and the element-wise max of `x_v` with a semantic embedding
//! `x_s` distilled from the sample's noisy title by bilinear word attention.
//! Titles are used only during training; inference is visual-only.
//!
//! Everything runs on a small define-by-run autodiff engine over `f64`
//! tensors ([`graph`]), checked against finite differences ([`gradcheck`]).

// Parameter checks are written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod optim;
pub mod shard;
pub mod synth;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;

/// Version string embedded in checkpoints and reports.
pub const VERSION: &str = concat!("sicot ", env!("CARGO_PKG_VERSION"));
