//! Dialogue state tracking with a small causal language model whose value
//! predictions are conditioned on slot features exchanged through K-hop graph
//! attention layers.
//!
//! The crate is organised bottom-up:
//!
//! * [`numeric`]: dense `f64` matrices, a reverse-mode tape, AdamW and a
//!   finite-difference gradient checker.
//! * [`graph`]: slot / slot-value topologies, the multi-head K-hop attention
//!   layer, layer cascades and a per-node message-passing oracle.
//! * [`data`]: ontology, dialogues, tokenizer, state / history serialization,
//!   last-turn filtering and a synthetic correlated-slot corpus generator.
//! * [`model`]: the tracker (language model, feature injection, training,
//!   constrained decoding, checkpoints).
//! * [`eval`]: joint / slot / per-slot accuracy, progress curves and value-pair
//!   dependency analysis, plus CSV reports.
//! * [`selftest`]: reusable verification suites with a fault-injection switch.

pub mod data;
pub mod eval;
pub mod error;
pub mod graph;
pub mod model;
pub mod numeric;
pub mod selftest;

pub use error::{Error, Result};
