//! Core of an LSTM text classifier that learns to skip words.
//!
//! Before each word the model looks at the current embedding, the state
//! built so far, and a cheap summary of the text still ahead, then decides
//! whether to run the LSTM update or copy the state through. Training uses
//! a gumbel-softmax relaxation of that decision plus a quadratic penalty
//! pulling the skip rate towards a target; inference takes hard decisions
//! and only pays for the words it keeps.
//!
//! The crate is `no_std` (with `alloc`): it holds the tensors, the
//! reverse-mode tape, the model, and the optimizer. File formats, corpora,
//! timing, and the CLI live in the `leap-lstm` crate.
#![no_std]

extern crate alloc;

pub mod data;
pub mod error;
pub mod gumbel;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
