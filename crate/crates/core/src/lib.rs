//! Core of the KatzGPT question-answering model.
//!
//! Everything here is pure computation over in-memory values and builds
//! without `std`: dense tensors with hand-written backward rules, the
//! byte-level BPE tokenizer, the decoder-only transformer, AdamW training
//! with sequential fine-tuning, corpus cleaning and example construction,
//! ROUGE scoring and ablation sweeps, and the multilingual chat pipeline
//! behind pluggable providers.
//!
//! File formats, HTTP, and the command line live in the `katz` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod corpus;
pub mod error;
pub mod eval;
pub mod lingua;
pub mod model;
pub mod numerics;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use model::{BiasMode, Model, ModelConfig};
pub use numerics::{Real, RngStream, Tensor};
pub use tokenizer::Vocabulary;
