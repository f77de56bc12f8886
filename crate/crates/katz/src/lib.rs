//! File formats, HTTP service, and command line around `katz-core`.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod providers;
pub mod service;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
