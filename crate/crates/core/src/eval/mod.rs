mod dependency;
mod metrics;
mod report;

pub use dependency::{
    band_mean_delta, ensure_same_turns, find_jaccard, jaccard_scores, pair_accuracy, pair_deltas,
    windowed_mean, windowed_pair_delta, JaccardEntry, PairDelta, ValuePair, WindowPoint,
};
pub use metrics::{
    joint_accuracy, per_slot_accuracy, predict_corpus, progress, progress_bucket, progress_curve,
    slot_accuracy, GoldPredictor, MetricsReport, ProgressPoint, SlotScore, StatePredictor, TurnPrediction,
};
pub use report::*;
