//! The tracker: language model, graph-feature injection, training, decoding
//! and checkpoints.

mod checkpoint;
mod lm;
mod tracker;
mod train;

pub use lm::{LanguageModel, LmConfig};
pub use tracker::{Tracker, TrackerConfig};
pub use train::{split_corpus, train, train_step, validation_loss, EpochLog, Regime, TrainConfig, TrainReport};
