//! Comma-separated report tables and turn-keyed prediction dumps.
//!
//! Every table has a header row and reads back into the same rows.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::dependency::{JaccardEntry, PairDelta, ValuePair, WindowPoint};
use super::metrics::{MetricsReport, ProgressPoint, SlotScore, TurnPrediction};
use crate::data::{BeliefState, Ontology};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDeltaRow {
    pub slot1: String,
    pub value1: String,
    pub slot2: String,
    pub value2: String,
    pub jaccard: f64,
    pub model_pair_accuracy: f64,
    pub baseline_pair_accuracy: f64,
    pub delta: f64,
}

impl From<&PairDelta> for PairDeltaRow {
    fn from(d: &PairDelta) -> Self {
        Self {
            slot1: d.pair.slot1.clone(),
            value1: d.pair.value1.clone(),
            slot2: d.pair.slot2.clone(),
            value2: d.pair.value2.clone(),
            jaccard: d.jaccard,
            model_pair_accuracy: d.model,
            baseline_pair_accuracy: d.baseline,
            delta: d.delta(),
        }
    }
}

impl From<&PairDeltaRow> for PairDelta {
    fn from(r: &PairDeltaRow) -> Self {
        Self {
            pair: ValuePair {
                slot1: r.slot1.clone(),
                value1: r.value1.clone(),
                slot2: r.slot2.clone(),
                value2: r.value2.clone(),
            },
            jaccard: r.jaccard,
            model: r.model_pair_accuracy,
            baseline: r.baseline_pair_accuracy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct WindowRow {
    jaccard: f64,
    mean_pair_accuracy_delta: f64,
    n: usize,
}

pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_rows(file, rows)
}

/// Like [`write_csv`] but into any writer. The header comes from the first
/// row, so an empty table is an empty file.
pub fn write_rows<T: Serialize, W: Write>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::Data(format!("flushing csv: {e}")))?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_rows(file)
}

pub fn read_rows<T: DeserializeOwned, R: std::io::Read>(input: R) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}

pub fn summary_rows(report: &MetricsReport) -> Vec<SummaryRow> {
    [
        ("joint_accuracy", report.joint_accuracy),
        ("slot_accuracy", report.slot_accuracy),
        ("turns", report.turns as f64),
        ("dialogues", report.dialogues as f64),
    ]
    .into_iter()
    .map(|(m, v)| SummaryRow {
        metric: m.into(),
        value: v,
    })
    .collect()
}

/// File names used by [`write_metrics_report`] inside the output directory.
pub const SUMMARY_FILE: &str = "summary.csv";
pub const PER_SLOT_FILE: &str = "per_slot.csv";
pub const PROGRESS_FILE: &str = "progress.csv";
pub const JACCARD_FILE: &str = "jaccard.csv";
pub const PAIR_DELTA_FILE: &str = "pair_deltas.csv";
pub const WINDOW_FILE: &str = "windowed_delta.csv";

pub fn write_metrics_report(dir: impl AsRef<Path>, report: &MetricsReport) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_csv(dir.join(SUMMARY_FILE), &summary_rows(report))?;
    write_csv(dir.join(PER_SLOT_FILE), &report.per_slot)?;
    write_csv(dir.join(PROGRESS_FILE), &report.progress)
}

pub fn read_metrics_report(dir: impl AsRef<Path>) -> Result<MetricsReport> {
    let dir = dir.as_ref();
    let summary: Vec<SummaryRow> = read_csv(dir.join(SUMMARY_FILE))?;
    let get = |name: &str| {
        summary
            .iter()
            .find(|r| r.metric == name)
            .map(|r| r.value)
            .ok_or_else(|| Error::Data(format!("{}: missing metric {name}", dir.join(SUMMARY_FILE).display())))
    };
    let per_slot: Vec<SlotScore> = read_csv(dir.join(PER_SLOT_FILE))?;
    let progress: Vec<ProgressPoint> = read_csv(dir.join(PROGRESS_FILE))?;
    Ok(MetricsReport {
        joint_accuracy: get("joint_accuracy")?,
        slot_accuracy: get("slot_accuracy")?,
        per_slot,
        progress,
        turns: get("turns")? as usize,
        dialogues: get("dialogues")? as usize,
    })
}

pub fn write_jaccard(path: impl AsRef<Path>, entries: &[JaccardEntry]) -> Result<()> {
    write_csv(path, entries)
}

pub fn write_pair_deltas(path: impl AsRef<Path>, deltas: &[PairDelta]) -> Result<()> {
    let rows: Vec<PairDeltaRow> = deltas.iter().map(PairDeltaRow::from).collect();
    write_csv(path, &rows)
}

pub fn read_pair_deltas(path: impl AsRef<Path>) -> Result<Vec<PairDelta>> {
    let rows: Vec<PairDeltaRow> = read_csv(path)?;
    Ok(rows.iter().map(PairDelta::from).collect())
}

pub fn write_windowed(path: impl AsRef<Path>, points: &[WindowPoint]) -> Result<()> {
    let rows: Vec<WindowRow> = points
        .iter()
        .map(|p| WindowRow {
            jaccard: p.center,
            mean_pair_accuracy_delta: p.mean,
            n: p.count,
        })
        .collect();
    write_csv(path, &rows)
}

pub fn read_windowed(path: impl AsRef<Path>) -> Result<Vec<WindowPoint>> {
    let rows: Vec<WindowRow> = read_csv(path)?;
    Ok(rows
        .into_iter()
        .map(|r| WindowPoint {
            center: r.jaccard,
            mean: r.mean_pair_accuracy_delta,
            count: r.n,
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
struct DumpRecord {
    dialogue: String,
    turn: usize,
    turns: usize,
    predicted: BTreeMap<String, String>,
    gold: BTreeMap<String, String>,
}

/// One JSON object per line, keyed by dialogue id and turn.
pub fn save_predictions(path: impl AsRef<Path>, predictions: &[TurnPrediction], ontology: &Ontology) -> Result<()> {
    let path = path.as_ref();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for p in predictions {
        let rec = DumpRecord {
            dialogue: p.dialogue_id.clone(),
            turn: p.turn,
            turns: p.total_turns,
            predicted: p.predicted.to_sparse(ontology),
            gold: p.gold.to_sparse(ontology),
        };
        let line = serde_json::to_string(&rec).expect("prediction record serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_predictions(path: impl AsRef<Path>, ontology: &Ontology) -> Result<Vec<TurnPrediction>> {
    let path = path.as_ref();
    let source = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DumpRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            source_name: source.clone(),
            line: i + 1,
            column: e.column(),
            message: e.to_string(),
        })?;
        let state = |m: &BTreeMap<String, String>| {
            BeliefState::from_sparse(ontology, m).map_err(|e| Error::Data(format!("{source}:{}: {e}", i + 1)))
        };
        out.push(TurnPrediction {
            predicted: state(&rec.predicted)?,
            gold: state(&rec.gold)?,
            dialogue_id: rec.dialogue,
            turn: rec.turn,
            total_turns: rec.turns,
        });
    }
    Ok(out)
}
