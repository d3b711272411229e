use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Placeholder value for an unfilled slot. Never a member of the value list.
pub const NONE_VALUE: &str = "none";

/// Collapses runs of whitespace so values compare by their token sequence.
pub fn normalize_value(value: &str) -> String {
    value.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotSpec {
    pub domain: String,
    pub slot: String,
    /// Words fed to the model before the slot; defaults to `"<domain> <slot>"`.
    pub description: String,
    /// Indices into [`Ontology::values`].
    pub candidates: Vec<usize>,
}

impl SlotSpec {
    /// `domain-slot`, e.g. `hotel-name`.
    pub fn key(&self) -> String {
        format!("{}-{}", self.domain, self.slot)
    }

    /// Dedicated special token, e.g. `<hotel-name>`.
    pub fn token(&self) -> String {
        format!("<{}>", self.key())
    }
}

/// Domains, the ordered domain-slot list, and the global value candidates.
///
/// Slot order is canonical: it fixes the prompt string, the serialized state,
/// graph node order and every per-slot report.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ontology {
    domains: Vec<String>,
    slots: Vec<SlotSpec>,
    values: Vec<String>,
    slot_index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct OntologyFile {
    domains: Vec<String>,
    slots: Vec<SlotRecord>,
    values: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct SlotRecord {
    domain: String,
    slot: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    description: Option<String>,
    #[serde(default)]
    candidates: Vec<String>,
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Ontology {
        field: field.into(),
        message: message.into(),
    }
}

impl Ontology {
    pub fn new(domains: Vec<String>, slots: Vec<SlotSpec>, values: Vec<String>) -> Result<Self> {
        if slots.is_empty() {
            return Err(invalid("slots", "ontology needs at least one domain-slot"));
        }
        let domain_set: HashSet<&str> = domains.iter().map(String::as_str).collect();
        if domain_set.len() != domains.len() {
            return Err(invalid("domains", "duplicate domain"));
        }
        let mut seen_values = HashSet::new();
        for (i, v) in values.iter().enumerate() {
            if v.trim().is_empty() {
                return Err(invalid(format!("values[{i}]"), "empty value"));
            }
            if normalize_value(v) != *v {
                return Err(invalid(format!("values[{i}]"), format!("value {v:?} is not whitespace-normalized")));
            }
            if v == NONE_VALUE {
                return Err(invalid(format!("values[{i}]"), "'none' is reserved for unfilled slots"));
            }
            if !seen_values.insert(v.as_str()) {
                return Err(invalid(format!("values[{i}]"), format!("duplicate value {v:?}")));
            }
        }
        let mut slot_index = HashMap::new();
        for (i, s) in slots.iter().enumerate() {
            let field = format!("slots[{i}]");
            if !domain_set.contains(s.domain.as_str()) {
                return Err(invalid(field, format!("unknown domain {:?}", s.domain)));
            }
            if s.slot.is_empty() || s.slot.contains(char::is_whitespace) || s.domain.contains(char::is_whitespace) {
                return Err(invalid(field, "domain and slot names must be single words"));
            }
            if s.description.split_whitespace().next().is_none() {
                return Err(invalid(field, "empty description"));
            }
            if let Some(&c) = s.candidates.iter().find(|&&c| c >= values.len()) {
                return Err(invalid(field, format!("candidate index {c} outside value list")));
            }
            if slot_index.insert(s.key(), i).is_some() {
                return Err(invalid(field, format!("duplicate slot {}", s.key())));
            }
        }
        Ok(Self {
            domains,
            slots,
            values,
            slot_index,
        })
    }

    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    pub fn slots(&self) -> &[SlotSpec] {
        &self.slots
    }

    pub fn values(&self) -> &[String] {
        &self.values
    }

    /// `N_ds`
    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    /// `N_v`
    pub fn value_count(&self) -> usize {
        self.values.len()
    }

    pub fn slot_index(&self, key: &str) -> Option<usize> {
        self.slot_index.get(key).copied()
    }

    pub fn value_index(&self, value: &str) -> Option<usize> {
        self.values.iter().position(|v| v == value)
    }

    pub fn slot_keys(&self) -> Vec<String> {
        self.slots.iter().map(SlotSpec::key).collect()
    }

    pub fn candidate_values(&self, slot: usize) -> impl Iterator<Item = &str> + '_ {
        self.slots[slot].candidates.iter().map(|&c| self.values[c].as_str())
    }

    pub fn from_json(text: &str, source_name: &str) -> Result<Self> {
        let file: OntologyFile = serde_json::from_str(text).map_err(|e| Error::json(source_name, &e))?;
        let index: HashMap<&str, usize> = file.values.iter().enumerate().map(|(i, v)| (v.as_str(), i)).collect();
        let mut slots = Vec::with_capacity(file.slots.len());
        for (i, rec) in file.slots.iter().enumerate() {
            let mut candidates = Vec::with_capacity(rec.candidates.len());
            for c in &rec.candidates {
                let idx = index.get(normalize_value(c).as_str()).ok_or_else(|| {
                    invalid(format!("slots[{i}].candidates"), format!("unknown value {c:?}"))
                })?;
                candidates.push(*idx);
            }
            slots.push(SlotSpec {
                domain: rec.domain.clone(),
                slot: rec.slot.clone(),
                description: rec
                    .description
                    .clone()
                    .unwrap_or_else(|| format!("{} {}", rec.domain, rec.slot)),
                candidates,
            });
        }
        Ontology::new(file.domains, slots, file.values)
    }

    pub fn to_json(&self) -> String {
        let file = OntologyFile {
            domains: self.domains.clone(),
            slots: self
                .slots
                .iter()
                .map(|s| SlotRecord {
                    domain: s.domain.clone(),
                    slot: s.slot.clone(),
                    description: Some(s.description.clone()),
                    candidates: s.candidates.iter().map(|&c| self.values[c].clone()).collect(),
                })
                .collect(),
            values: self.values.clone(),
        };
        serde_json::to_string_pretty(&file).expect("ontology serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}
