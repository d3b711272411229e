//! Versioned JSON checkpoints: config, vocabulary, ontology and every named
//! parameter as `(name, shape, values)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tracker::{Tracker, TrackerConfig};
use crate::data::{Ontology, Tokenizer};
use crate::error::{Error, Result};
use crate::numeric::{Matrix, ParamStore};

const FORMAT: &str = "gatdst-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: (usize, usize),
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: TrackerConfig,
    vocabulary: Vec<String>,
    slot_tokens: usize,
    ontology: String,
    params: Vec<ParamRecord>,
}

impl Tracker {
    pub fn to_checkpoint_json(&self) -> String {
        let file = CheckpointFile {
            format: FORMAT.into(),
            version: VERSION,
            config: self.config().clone(),
            vocabulary: self.tokenizer().tokens().to_vec(),
            slot_tokens: self.tokenizer().slot_token_count(),
            ontology: self.ontology().to_json(),
            params: self
                .store()
                .entries()
                .iter()
                .map(|e| ParamRecord {
                    name: e.name.clone(),
                    shape: e.value.shape(),
                    values: e.value.as_slice().to_vec(),
                })
                .collect(),
        };
        serde_json::to_string(&file).expect("checkpoint serializes")
    }

    /// Rebuilds a tracker. Every parameter of a freshly constructed model must
    /// be present with the same shape, and no extra parameters are accepted.
    pub fn from_checkpoint_json(text: &str, source_name: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text).map_err(|e| Error::json(source_name, &e))?;
        if file.format != FORMAT || file.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "{source_name}: unsupported format {:?} version {}",
                file.format, file.version
            )));
        }
        let ontology = Ontology::from_json(&file.ontology, source_name)?;
        let tokenizer = Tokenizer::from_tokens(file.vocabulary, file.slot_tokens)?;
        let fresh = Tracker::new(file.config.clone(), ontology.clone(), tokenizer.clone())?;
        let template = fresh.store();
        if file.params.len() != template.len() {
            return Err(Error::Checkpoint(format!(
                "{source_name}: {} parameters stored, model expects {}",
                file.params.len(),
                template.len()
            )));
        }
        let mut store = ParamStore::new();
        for rec in file.params {
            let id = template
                .lookup(&rec.name)
                .ok_or_else(|| Error::Checkpoint(format!("{source_name}: unexpected parameter {}", rec.name)))?;
            let expected = template.get(id).shape();
            if rec.shape != expected {
                return Err(Error::Checkpoint(format!(
                    "{source_name}: parameter {} has shape {:?}, model expects {expected:?}",
                    rec.name, rec.shape
                )));
            }
            let value = Matrix::from_vec(rec.shape.0, rec.shape.1, rec.values)
                .map_err(|e| Error::Checkpoint(format!("{source_name}: parameter {}: {e}", rec.name)))?;
            if store.lookup(&rec.name).is_some() {
                return Err(Error::Checkpoint(format!("{source_name}: duplicate parameter {}", rec.name)));
            }
            store.add(rec.name, value, template.group(id));
        }
        Tracker::from_store(file.config, ontology, tokenizer, store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_checkpoint_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_json(&text, &path.display().to_string())
    }
}
