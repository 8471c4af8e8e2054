//! Learning per-node propagation depths for graph neural networks.
//!
//! A backbone produces a stack of representations `H_0..H_K`, one per
//! propagation depth. A variational head assigns every node a categorical
//! distribution over those depths, and training maximizes an evidence lower
//! bound with either alternating EM or joint variational inference, optionally
//! fitting the head on validation data through a bilevel update.

pub mod analysis;
pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod head;
pub mod tensor;
pub mod train;
pub mod util;

pub use error::{Error, Result};
pub use tensor::Tensor;
