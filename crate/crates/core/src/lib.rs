//! Dense (max-mean) versus global (mean-pooled) contrastive alignment of audio
//! and visual token embeddings.

pub mod aggregation;
pub mod cache;
pub mod commands;
pub mod config;
pub mod corpus;
pub mod error;
pub mod localization;
pub mod objective;
pub mod pipeline;
pub mod report;
pub mod retrieval;
pub mod tensor;

pub use error::{Error, Result};
