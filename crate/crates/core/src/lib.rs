//! Gaussian prompt and label tokens for script event prediction with a
//! masked language model trained from scratch.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod noise;
pub mod optim;
pub mod prompt;
pub mod scoring;
pub mod tensor;
pub mod train;
pub mod verbalizer;
pub mod vocab;

pub use error::{Error, Result};
