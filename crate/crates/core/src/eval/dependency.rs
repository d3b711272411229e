//! Inter-slot value dependency: gold-only Jaccard scores, per-pair accuracy
//! and the moving-window comparison of a model against a baseline.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::metrics::TurnPrediction;
use crate::data::{BeliefState, Ontology, NONE_VALUE};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JaccardEntry {
    pub slot1: String,
    pub value1: String,
    pub slot2: String,
    pub value2: String,
    pub score: f64,
    /// Samples in which both slots carry a value.
    pub support: usize,
}

impl JaccardEntry {
    pub fn pair(&self) -> ValuePair {
        ValuePair {
            slot1: self.slot1.clone(),
            value1: self.value1.clone(),
            slot2: self.slot2.clone(),
            value2: self.value2.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ValuePair {
    pub slot1: String,
    pub value1: String,
    pub slot2: String,
    pub value2: String,
}

/// Jaccard scores for every value pair of every two distinct slots.
///
/// Only samples where both slots are filled take part. Over those, `C1`
/// flags `slot1 == value1` and `C2` flags `slot2 == value2`; the score is
/// the fraction of participating samples on which the two flags agree.
/// Pairs are emitted once, with `slot1` before `slot2` in ontology order,
/// and only for values observed in at least one participating sample.
pub fn jaccard_scores(states: &[BeliefState], ontology: &Ontology) -> Result<Vec<JaccardEntry>> {
    let n = ontology.slot_count();
    if let Some(s) = states.iter().find(|s| s.len() != n) {
        return Err(Error::Data(format!(
            "belief state has {} slots, ontology has {n}",
            s.len()
        )));
    }
    let keys = ontology.slot_keys();
    let mut out = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            let both: Vec<(&str, &str)> = states
                .iter()
                .map(|s| (s.get(a), s.get(b)))
                .filter(|(x, y)| *x != NONE_VALUE && *y != NONE_VALUE)
                .collect();
            if both.is_empty() {
                continue;
            }
            let va: BTreeSet<&str> = both.iter().map(|p| p.0).collect();
            let vb: BTreeSet<&str> = both.iter().map(|p| p.1).collect();
            for v1 in &va {
                for v2 in &vb {
                    let agree = both.iter().filter(|(x, y)| (x == v1) == (y == v2)).count();
                    out.push(JaccardEntry {
                        slot1: keys[a].clone(),
                        value1: v1.to_string(),
                        slot2: keys[b].clone(),
                        value2: v2.to_string(),
                        score: agree as f64 / both.len() as f64,
                        support: both.len(),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Looks up a score regardless of the order the two slot values are given in.
pub fn find_jaccard<'a>(entries: &'a [JaccardEntry], s1: &str, v1: &str, s2: &str, v2: &str) -> Option<&'a JaccardEntry> {
    entries.iter().find(|e| {
        (e.slot1 == s1 && e.value1 == v1 && e.slot2 == s2 && e.value2 == v2)
            || (e.slot1 == s2 && e.value1 == v2 && e.slot2 == s1 && e.value2 == v1)
    })
}

/// Over turns whose gold state holds both values, the fraction where the
/// prediction holds both too. `None` when no gold turn holds the pair.
pub fn pair_accuracy(predictions: &[TurnPrediction], ontology: &Ontology, pair: &ValuePair) -> Result<Option<f64>> {
    let a = slot_index(ontology, &pair.slot1)?;
    let b = slot_index(ontology, &pair.slot2)?;
    let (mut total, mut hits) = (0usize, 0usize);
    for p in predictions {
        if p.gold.get(a) == pair.value1 && p.gold.get(b) == pair.value2 {
            total += 1;
            hits += usize::from(p.predicted.get(a) == pair.value1 && p.predicted.get(b) == pair.value2);
        }
    }
    Ok((total > 0).then(|| hits as f64 / total as f64))
}

fn slot_index(ontology: &Ontology, key: &str) -> Result<usize> {
    ontology
        .slot_index(key)
        .ok_or_else(|| Error::Data(format!("unknown slot {key}")))
}

/// One row of the model-versus-baseline comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDelta {
    pub pair: ValuePair,
    pub jaccard: f64,
    pub model: f64,
    pub baseline: f64,
}

impl PairDelta {
    pub fn delta(&self) -> f64 {
        self.model - self.baseline
    }
}

/// Pair accuracies of both prediction sets for every Jaccard entry with gold
/// support in the evaluated turns. The two sets must cover the same turns.
pub fn pair_deltas(
    entries: &[JaccardEntry],
    model: &[TurnPrediction],
    baseline: &[TurnPrediction],
    ontology: &Ontology,
) -> Result<Vec<PairDelta>> {
    ensure_same_turns(model, baseline)?;
    let mut out = Vec::new();
    for e in entries {
        let pair = e.pair();
        if let (Some(m), Some(b)) = (
            pair_accuracy(model, ontology, &pair)?,
            pair_accuracy(baseline, ontology, &pair)?,
        ) {
            out.push(PairDelta {
                pair,
                jaccard: e.score,
                model: m,
                baseline: b,
            });
        }
    }
    Ok(out)
}

/// Errors unless both prediction sets key the same turns with the same gold.
pub fn ensure_same_turns(a: &[TurnPrediction], b: &[TurnPrediction]) -> Result<()> {
    let index = |ps: &[TurnPrediction]| -> BTreeMap<(String, usize), BeliefState> {
        ps.iter()
            .map(|p| ((p.dialogue_id.clone(), p.turn), p.gold.clone()))
            .collect()
    };
    let (ia, ib) = (index(a), index(b));
    if ia.len() != a.len() || ib.len() != b.len() {
        return Err(Error::Data("prediction dump repeats a turn".into()));
    }
    if ia != ib {
        let missing = ia
            .keys()
            .find(|k| !ib.contains_key(*k))
            .or_else(|| ib.keys().find(|k| !ia.contains_key(*k)));
        return Err(match missing {
            Some((d, t)) => Error::Data(format!("prediction dumps differ: turn {d}#{t} is not in both")),
            None => Error::Data("prediction dumps disagree on gold states".into()),
        });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowPoint {
    pub center: f64,
    pub mean: f64,
    pub count: usize,
}

/// Mean of the values whose abscissa lies within `window / 2` of each
/// center. Centers default to the sorted distinct abscissae; empty windows
/// are dropped.
pub fn windowed_mean(points: &[(f64, f64)], window: f64, centers: Option<&[f64]>) -> Result<Vec<WindowPoint>> {
    if !(window > 0.0) {
        return Err(Error::Config(format!("window must be positive, got {window}")));
    }
    if points.is_empty() {
        return Err(Error::Data("no points to smooth".into()));
    }
    let owned;
    let centers = match centers {
        Some(c) => c,
        None => {
            let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
            xs.sort_by(f64::total_cmp);
            xs.dedup();
            owned = xs;
            &owned
        }
    };
    let half = window / 2.0;
    Ok(centers
        .iter()
        .filter_map(|&c| {
            let inside: Vec<f64> = points
                .iter()
                .filter(|(x, _)| (x - c).abs() <= half + 1e-12)
                .map(|p| p.1)
                .collect();
            (!inside.is_empty()).then(|| WindowPoint {
                center: c,
                mean: inside.iter().sum::<f64>() / inside.len() as f64,
                count: inside.len(),
            })
        })
        .collect())
}

/// Smoothed pair-accuracy delta as a function of the Jaccard score.
pub fn windowed_pair_delta(deltas: &[PairDelta], window: f64, centers: Option<&[f64]>) -> Result<Vec<WindowPoint>> {
    let points: Vec<(f64, f64)> = deltas.iter().map(|d| (d.jaccard, d.delta())).collect();
    windowed_mean(&points, window, centers)
}

/// Mean delta over pairs whose Jaccard score falls in `[lo, hi]`.
pub fn band_mean_delta(deltas: &[PairDelta], lo: f64, hi: f64) -> Option<f64> {
    let inside: Vec<f64> = deltas
        .iter()
        .filter(|d| d.jaccard >= lo && d.jaccard <= hi)
        .map(PairDelta::delta)
        .collect();
    (!inside.is_empty()).then(|| inside.iter().sum::<f64>() / inside.len() as f64)
}
