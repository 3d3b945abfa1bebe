//! Consistency-learning fine-grained fusion network for multimodal fake-news
//! detection.
//!
//! Word and region embeddings are projected into a shared space, word-region
//! pairs are split by cosine relevance into a consistent part and an
//! inconsistency-candidate part, each part is summarized into one vector, and
//! a selection head weighs the two summaries before classification.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod explain;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod projection;
pub mod selection;
pub mod sweep;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
