//! Zero-shot slot filling with a sequence tagger conditioned on a slot's
//! description and a handful of its example values.
//!
//! Each utterance is tagged once per candidate slot with IOB labels. The
//! utterance is encoded by a bidirectional GRU; the slot description is
//! mean-pooled; each example value is mean-pooled and attended to from every
//! utterance position; a bidirectional LSTM over the concatenation produces
//! per-token tag distributions.

pub mod corpus;
pub mod error;
pub mod evaluator;
pub mod model;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
