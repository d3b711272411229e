use std::path::{Path, PathBuf};

use gatdst::data::SynthConfig;
use gatdst::graph::GatConfig;
use gatdst::model::{LmConfig, TrackerConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

/// File locations. Relative paths are resolved against the `--out` directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub ontology: PathBuf,
    pub corpus: PathBuf,
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
    pub checkpoint: PathBuf,
    pub train_log: PathBuf,
    pub report_dir: PathBuf,
    pub predictions: PathBuf,
    /// Prediction dump of the comparison model for `analyze`.
    pub baseline_predictions: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            ontology: "ontology.json".into(),
            corpus: "corpus.jsonl".into(),
            train: "train.jsonl".into(),
            valid: "valid.jsonl".into(),
            test: "test.jsonl".into(),
            checkpoint: "model.json".into(),
            train_log: "train_log.csv".into(),
            report_dir: "report".into(),
            predictions: "predictions.jsonl".into(),
            baseline_predictions: "baseline_predictions.jsonl".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub test_fraction: f64,
    pub valid_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            valid_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    pub progress_buckets: usize,
    /// Width of the moving window over Jaccard scores.
    pub window: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            progress_buckets: 10,
            window: 0.1,
        }
    }
}

/// Everything one run needs; loaded from a JSON file and adjusted by flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub split: SplitConfig,
    pub model: LmConfig,
    pub graph: GatConfig,
    pub max_value_tokens: usize,
    pub train: TrainConfig,
    pub analysis: AnalysisConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            split: SplitConfig::default(),
            model: LmConfig::default(),
            graph: GatConfig::default(),
            max_value_tokens: TrackerConfig::default().max_value_tokens,
            train: TrainConfig::default(),
            analysis: AnalysisConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }

    /// Applies `key.path=value` overrides. The value is read as JSON when it
    /// parses and as a plain string otherwise, so `--set graph.graph_type=DSGraph`
    /// and `--set train.lr_lm=1e-3` both work.
    pub fn with_overrides(self, overrides: &[String]) -> Result<Self, CliError> {
        if overrides.is_empty() {
            return Ok(self);
        }
        let mut tree = serde_json::to_value(&self).expect("config serializes");
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| CliError::Input(format!("override {item:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut tree, key, value)?;
        }
        serde_json::from_value(tree).map_err(|e| CliError::Input(format!("after overrides: {e}")))
    }

    /// Uses one seed for data generation, initialization and shuffling.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synth.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn tracker_config(&self) -> TrackerConfig {
        TrackerConfig {
            lm: self.model.clone(),
            gat: self.graph.clone(),
            max_value_tokens: self.max_value_tokens,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.tracker_config().validate().map_err(CliError::from)?;
        self.train.validate().map_err(CliError::from)?;
        let f = &self.split;
        if !(0.0..1.0).contains(&f.test_fraction) || !(0.0..1.0).contains(&f.valid_fraction) {
            return Err(CliError::Input("split fractions must lie in [0, 1)".into()));
        }
        if self.analysis.progress_buckets < 2 || !(self.analysis.window > 0.0) {
            return Err(CliError::Input(
                "analysis needs at least 2 progress buckets and a positive window".into(),
            ));
        }
        Ok(())
    }
}

fn set_path(tree: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Input(format!("override {key:?}: {} is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(CliError::Input(format!("override {key:?}: unknown key {part:?}")));
            }
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .get_mut(*part)
            .ok_or_else(|| CliError::Input(format!("override {key:?}: unknown section {part:?}")))?;
    }
    Err(CliError::Input("empty override key".into()))
}

pub fn resolve(out: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        out.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gatdst::graph::GraphType;

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = RunConfig::default()
            .with_overrides(&[
                "graph.graph_type=DSGraph".into(),
                "train.lr_lm=0.001".into(),
                "model.hidden=16".into(),
                "train.regime=last_turn".into(),
            ])
            .unwrap();
        assert_eq!(cfg.graph.graph_type, GraphType::DsGraph);
        assert_eq!(cfg.train.lr_lm, 1e-3);
        assert_eq!(cfg.model.hidden, 16);
        assert_eq!(cfg.train.regime, gatdst::model::Regime::LastTurn);
    }

    #[test]
    fn bad_overrides_are_input_errors() {
        for bad in ["nonsense", "model.nope=1", "model.hidden.deeper=1", "model.hidden=\"x\""] {
            let err = RunConfig::default().with_overrides(&[bad.into()]).unwrap_err();
            assert!(matches!(err, CliError::Input(_)), "{bad}: {err:?}");
        }
    }

    #[test]
    fn seed_flag_sets_every_seed() {
        let cfg = RunConfig::default().with_seed(7);
        assert_eq!((cfg.synth.seed, cfg.model.seed, cfg.train.seed), (7, 7, 7));
    }

    #[test]
    fn default_round_trips_through_json() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
