use serde::{Deserialize, Serialize};

use crate::data::{BeliefState, Dialogue, Ontology};
use crate::error::{Error, Result};
use crate::model::Tracker;

/// Anything that can produce a belief state for a dialogue turn.
pub trait StatePredictor {
    fn predict(&self, dialogue: &Dialogue, turn: usize) -> BeliefState;
}

impl StatePredictor for Tracker {
    fn predict(&self, dialogue: &Dialogue, turn: usize) -> BeliefState {
        let parsed = self.predict_state(dialogue, turn);
        for w in &parsed.warnings {
            log::warn!("{} turn {turn}: {w}", dialogue.id);
        }
        parsed.state
    }
}

/// Returns the gold annotation; an upper bound for every metric.
#[derive(Clone, Copy, Debug, Default)]
pub struct GoldPredictor;

impl StatePredictor for GoldPredictor {
    fn predict(&self, dialogue: &Dialogue, turn: usize) -> BeliefState {
        dialogue.state_at(turn).clone()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TurnPrediction {
    pub dialogue_id: String,
    /// 1-based.
    pub turn: usize,
    pub total_turns: usize,
    pub predicted: BeliefState,
    pub gold: BeliefState,
}

impl TurnPrediction {
    pub fn is_joint_correct(&self) -> bool {
        self.predicted == self.gold
    }

    pub fn correct_slots(&self) -> usize {
        (0..self.gold.len())
            .filter(|&i| self.predicted.get(i) == self.gold.get(i))
            .count()
    }
}

/// Predicts every turn of every dialogue.
pub fn predict_corpus<P: StatePredictor + ?Sized>(predictor: &P, corpus: &[Dialogue]) -> Vec<TurnPrediction> {
    corpus
        .iter()
        .flat_map(|d| {
            (1..=d.len()).map(move |t| TurnPrediction {
                dialogue_id: d.id.clone(),
                turn: t,
                total_turns: d.len(),
                predicted: predictor.predict(d, t),
                gold: d.state_at(t).clone(),
            })
        })
        .collect()
}

fn check(predictions: &[TurnPrediction]) -> Result<usize> {
    let first = predictions
        .first()
        .ok_or_else(|| Error::Data("no predictions to score".into()))?;
    let n = first.gold.len();
    if let Some(p) = predictions.iter().find(|p| p.gold.len() != n || p.predicted.len() != n) {
        return Err(Error::Data(format!(
            "{} turn {}: state sizes differ from {n} slots",
            p.dialogue_id, p.turn
        )));
    }
    Ok(n)
}

/// Fraction of turns whose whole predicted state matches gold.
pub fn joint_accuracy(predictions: &[TurnPrediction]) -> Result<f64> {
    check(predictions)?;
    let hits = predictions.iter().filter(|p| p.is_joint_correct()).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Fraction of (slot, turn) pairs predicted correctly, `none` slots included.
pub fn slot_accuracy(predictions: &[TurnPrediction]) -> Result<f64> {
    let n = check(predictions)?;
    let hits: usize = predictions.iter().map(TurnPrediction::correct_slots).sum();
    Ok(hits as f64 / (n * predictions.len()) as f64)
}

/// Per-slot accuracy in ontology order.
pub fn per_slot_accuracy(predictions: &[TurnPrediction], ontology: &Ontology) -> Result<Vec<f64>> {
    let n = check(predictions)?;
    if n != ontology.slot_count() {
        return Err(Error::Data(format!(
            "predictions have {n} slots, ontology has {}",
            ontology.slot_count()
        )));
    }
    let mut hits = vec![0usize; n];
    for p in predictions {
        for (i, h) in hits.iter_mut().enumerate() {
            if p.predicted.get(i) == p.gold.get(i) {
                *h += 1;
            }
        }
    }
    Ok(hits.into_iter().map(|h| h as f64 / predictions.len() as f64).collect())
}

/// `(t-1)/(T-1)`; a single-turn dialogue is at its last turn, so 1.0.
pub fn progress(turn: usize, total_turns: usize) -> f64 {
    if total_turns <= 1 {
        1.0
    } else {
        (turn - 1) as f64 / (total_turns - 1) as f64
    }
}

/// Equal-width bucket index of a progress value in `[0, 1]`.
pub fn progress_bucket(p: f64, buckets: usize) -> usize {
    ((p * buckets as f64).floor() as usize).min(buckets - 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgressPoint {
    pub bucket: usize,
    pub lower: f64,
    pub upper: f64,
    /// Joint accuracy in the bucket; `None` when empty.
    pub accuracy: Option<f64>,
    pub count: usize,
}

pub fn progress_curve(predictions: &[TurnPrediction], buckets: usize) -> Result<Vec<ProgressPoint>> {
    if buckets < 2 {
        return Err(Error::Config(format!("progress curve needs at least 2 buckets, got {buckets}")));
    }
    let mut counts = vec![0usize; buckets];
    let mut hits = vec![0usize; buckets];
    for p in predictions {
        let b = progress_bucket(progress(p.turn, p.total_turns), buckets);
        counts[b] += 1;
        hits[b] += usize::from(p.is_joint_correct());
    }
    Ok((0..buckets)
        .map(|b| ProgressPoint {
            bucket: b,
            lower: b as f64 / buckets as f64,
            upper: (b + 1) as f64 / buckets as f64,
            accuracy: (counts[b] > 0).then(|| hits[b] as f64 / counts[b] as f64),
            count: counts[b],
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotScore {
    pub slot: String,
    pub accuracy: f64,
    /// Accuracy minus the baseline's, when a baseline report is supplied.
    pub delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub joint_accuracy: f64,
    pub slot_accuracy: f64,
    pub per_slot: Vec<SlotScore>,
    pub progress: Vec<ProgressPoint>,
    pub turns: usize,
    pub dialogues: usize,
}

impl MetricsReport {
    pub fn compute(predictions: &[TurnPrediction], ontology: &Ontology, buckets: usize) -> Result<Self> {
        let per_slot = per_slot_accuracy(predictions, ontology)?
            .into_iter()
            .zip(ontology.slot_keys())
            .map(|(accuracy, slot)| SlotScore {
                slot,
                accuracy,
                delta: None,
            })
            .collect();
        let mut ids: Vec<&str> = predictions.iter().map(|p| p.dialogue_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        Ok(Self {
            joint_accuracy: joint_accuracy(predictions)?,
            slot_accuracy: slot_accuracy(predictions)?,
            per_slot,
            progress: progress_curve(predictions, buckets)?,
            turns: predictions.len(),
            dialogues: ids.len(),
        })
    }

    /// Fills per-slot deltas against `baseline`, matching slots by name.
    pub fn with_baseline(mut self, baseline: &MetricsReport) -> Result<Self> {
        for s in &mut self.per_slot {
            let b = baseline
                .per_slot
                .iter()
                .find(|b| b.slot == s.slot)
                .ok_or_else(|| Error::Data(format!("baseline report lacks slot {}", s.slot)))?;
            s.delta = Some(s.accuracy - b.accuracy);
        }
        Ok(self)
    }
}
