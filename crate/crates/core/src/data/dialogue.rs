use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ontology::{normalize_value, Ontology, NONE_VALUE};
use crate::error::{Error, Result};

/// Total assignment of every domain-slot to a value; `"none"` means unfilled.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BeliefState {
    values: Vec<String>,
}

impl BeliefState {
    pub fn empty(slot_count: usize) -> Self {
        Self {
            values: vec![NONE_VALUE.to_string(); slot_count],
        }
    }

    pub fn from_values(values: Vec<String>) -> Self {
        let values = values
            .into_iter()
            .map(|v| {
                let v = normalize_value(&v);
                if v.is_empty() {
                    NONE_VALUE.to_string()
                } else {
                    v
                }
            })
            .collect();
        Self { values }
    }

    /// Builds a state from sparse `slot-key → value` pairs; omitted slots are `none`.
    pub fn from_sparse(ontology: &Ontology, sparse: &BTreeMap<String, String>) -> Result<Self> {
        let mut state = Self::empty(ontology.slot_count());
        for (key, value) in sparse {
            let idx = ontology
                .slot_index(key)
                .ok_or_else(|| Error::Data(format!("state references unknown slot {key:?}")))?;
            state.set(idx, value);
        }
        Ok(state)
    }

    pub fn to_sparse(&self, ontology: &Ontology) -> BTreeMap<String, String> {
        ontology
            .slots()
            .iter()
            .zip(&self.values)
            .filter(|(_, v)| v.as_str() != NONE_VALUE)
            .map(|(s, v)| (s.key(), v.clone()))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, slot: usize) -> &str {
        &self.values[slot]
    }

    pub fn set(&mut self, slot: usize, value: &str) {
        let v = normalize_value(value);
        self.values[slot] = if v.is_empty() { NONE_VALUE.to_string() } else { v };
    }

    pub fn is_filled(&self, slot: usize) -> bool {
        self.values[slot] != NONE_VALUE
    }

    pub fn values(&self) -> &[String] {
        &self.values
    }

    pub fn filled_count(&self) -> usize {
        (0..self.len()).filter(|&i| self.is_filled(i)).count()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Turn {
    pub user: String,
    pub system: String,
    /// Cumulative belief state after this turn.
    pub state: BeliefState,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    /// Gold state at 1-based turn `t`.
    pub fn state_at(&self, t: usize) -> &BeliefState {
        &self.turns[t - 1].state
    }
}

/// One supervised example: dialogue index and 1-based turn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SampleRef {
    pub dialogue: usize,
    pub turn: usize,
}

/// Every turn of every dialogue, in corpus order.
pub fn turn_samples(corpus: &[Dialogue]) -> Vec<SampleRef> {
    corpus
        .iter()
        .enumerate()
        .flat_map(|(d, dlg)| (1..=dlg.len()).map(move |turn| SampleRef { dialogue: d, turn }))
        .collect()
}

/// Last-turn supervision: one sample per dialogue at its final turn. Earlier
/// turns only appear as history of that sample.
pub fn last_turn_filter(corpus: &[Dialogue]) -> Vec<SampleRef> {
    corpus
        .iter()
        .enumerate()
        .filter(|(_, d)| !d.is_empty())
        .map(|(d, dlg)| SampleRef {
            dialogue: d,
            turn: dlg.len(),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SupervisionStats {
    pub dialogues: usize,
    pub turns: usize,
    pub last_turn_samples: usize,
}

impl SupervisionStats {
    pub fn of(corpus: &[Dialogue]) -> Self {
        Self {
            dialogues: corpus.len(),
            turns: corpus.iter().map(Dialogue::len).sum(),
            last_turn_samples: last_turn_filter(corpus).len(),
        }
    }

    /// Fraction of turn-level samples kept under last-turn supervision.
    pub fn ratio(&self) -> f64 {
        if self.turns == 0 {
            0.0
        } else {
            self.last_turn_samples as f64 / self.turns as f64
        }
    }
}

#[derive(Serialize, Deserialize)]
struct DialogueRecord {
    id: String,
    turns: Vec<TurnRecord>,
}

#[derive(Serialize, Deserialize)]
struct TurnRecord {
    user: String,
    system: String,
    #[serde(default)]
    state: BTreeMap<String, String>,
}

pub fn dialogue_to_json(dialogue: &Dialogue, ontology: &Ontology) -> String {
    let rec = DialogueRecord {
        id: dialogue.id.clone(),
        turns: dialogue
            .turns
            .iter()
            .map(|t| TurnRecord {
                user: t.user.clone(),
                system: t.system.clone(),
                state: t.state.to_sparse(ontology),
            })
            .collect(),
    };
    serde_json::to_string(&rec).expect("dialogue serializes")
}

pub fn dialogue_from_json(line: &str, ontology: &Ontology, source: &str, line_no: usize) -> Result<Dialogue> {
    let rec: DialogueRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
        source_name: source.to_string(),
        line: line_no,
        column: e.column(),
        message: e.to_string(),
    })?;
    if rec.turns.is_empty() {
        return Err(Error::Data(format!("dialogue {} has no turns", rec.id)));
    }
    let turns = rec
        .turns
        .into_iter()
        .map(|t| {
            Ok(Turn {
                user: t.user,
                system: t.system,
                state: BeliefState::from_sparse(ontology, &t.state)
                    .map_err(|e| Error::Data(format!("{source}:{line_no}: {e}")))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dialogue { id: rec.id, turns })
}

/// Reads a corpus file: one JSON dialogue record per line, blank lines ignored.
pub fn load_corpus(path: impl AsRef<Path>, ontology: &Ontology) -> Result<Vec<Dialogue>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let source = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(dialogue_from_json(&line, ontology, &source, i + 1)?);
    }
    Ok(out)
}

pub fn save_corpus(path: impl AsRef<Path>, corpus: &[Dialogue], ontology: &Ontology) -> Result<()> {
    let path = path.as_ref();
    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for d in corpus {
        writeln!(file, "{}", dialogue_to_json(d, ontology)).map_err(|e| Error::io(path, e))?;
    }
    file.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dialogue(id: &str, turns: usize) -> Dialogue {
        Dialogue {
            id: id.into(),
            turns: (0..turns)
                .map(|i| Turn {
                    user: format!("u{i}"),
                    system: format!("s{i}"),
                    state: BeliefState::empty(2),
                })
                .collect(),
        }
    }

    #[test]
    fn last_turn_filter_keeps_one_sample_per_dialogue() {
        let corpus = vec![dialogue("a", 3), dialogue("b", 5)];
        assert_eq!(turn_samples(&corpus).len(), 8);
        let last = last_turn_filter(&corpus);
        assert_eq!(
            last,
            vec![SampleRef { dialogue: 0, turn: 3 }, SampleRef { dialogue: 1, turn: 5 }]
        );
        let single = vec![dialogue("c", 1)];
        assert_eq!(last_turn_filter(&single), turn_samples(&single));
    }

    #[test]
    fn stats_ratio() {
        let corpus = vec![dialogue("a", 3), dialogue("b", 5)];
        let s = SupervisionStats::of(&corpus);
        assert_eq!((s.dialogues, s.turns, s.last_turn_samples), (2, 8, 2));
        assert_eq!(s.ratio(), 0.25);
    }

    #[test]
    fn belief_state_normalizes_whitespace() {
        let mut s = BeliefState::empty(2);
        s.set(0, "  demo   hotel ");
        assert_eq!(s.get(0), "demo hotel");
        s.set(1, "   ");
        assert!(!s.is_filled(1));
    }
}
