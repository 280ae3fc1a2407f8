//! Retrieval-augmented, gradient-based per-question adaptation of a small
//! joint-embedding VQA model, together with a synthetic changing-priors
//! benchmark and an experiment harness.

pub mod adapt;
pub mod diffcore;
pub mod harness;
mod error;
pub mod model;
pub mod retrieval;
pub mod seed;
pub mod synthdata;
pub mod text;

pub use error::{Error, Result};
