//! Attentive grouping for deep metric learning.
//!
//! A small, dependency-light toolkit: a reverse-mode autodiff engine over
//! `f64` tensors, a cyclic-convolution backbone, the attentive (A), multi
//! linear (M) and single (N) grouping heads, pair and diversity losses, an
//! ADAM trainer with a binary checkpoint format, retrieval/clustering
//! metrics and attention-map export.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod grouping;
pub mod interpret;
mod kernels;
pub mod losses;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod selfcheck;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use kernels::{sigmoid, softplus};
pub use tensor::Tensor;
