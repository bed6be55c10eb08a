//! Grounded instruction parsing: converts a natural-language robot
//! instruction into an ordered list of tasks, each with typed arguments,
//! and grounds argument phrases to an object-detector vocabulary.
//!
//! The model is an encoder with two nested auto-regressive decoders: an
//! outer decoder emits task spans and types, and for every task an inner
//! decoder emits that task's argument spans and types. A BIO tagging head
//! over the encoder states grounds object phrases.

pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod grounding;
pub mod inference;
pub mod loss;
pub mod model;
pub mod nn;
pub mod span;
pub mod synth;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
