//! Corpora, checkpoints, the training loop, benchmarks, analysis, and the
//! `leap` command line around `leap-core`.

pub mod analysis;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod run;
pub mod synthetic;
pub mod text;
pub mod trainer;

pub use error::{LeapError, Result};
