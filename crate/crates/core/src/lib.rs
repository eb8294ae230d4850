//! Social group detection in crowds.
//!
//! A relation embedding network is pretrained by recovering swapped subject positions,
//! then fine-tuned with a stacked-attention recurrent head that predicts pairwise
//! same-group scores. Label propagation turns the scores into groups.

// `!(x > 0.0)` style checks also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod embedding;
pub mod error;
pub mod features;
pub mod grouping;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod prediction;
pub mod scene;
pub mod simulator;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
