//! Joint intent classification and entity tagging with transfer from
//! unlabeled text through language-model pretraining.

pub mod checkpoint;
pub mod corpus;
pub mod crf;
pub mod embeddings;
pub mod error;
pub mod lm;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod report;
pub mod schedules;
pub mod synthetic;
pub mod train;
pub mod train_util;
pub mod transfer;

pub use error::{Error, Result};
