//! Synthetic multi-domain dialogues with correlated slot pairs.
//!
//! Each session draws a final goal (which slots are filled and with what), then
//! reveals the goal slot by slot over its turns. Designated slot pairs copy the
//! partner's value with probability `rho` and otherwise draw independently,
//! which plants value-level dependencies across domains.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dialogue::{BeliefState, Dialogue, Turn};
use super::ontology::{normalize_value, Ontology, SlotSpec};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSlot {
    pub name: String,
    /// Key into [`SynthConfig::pools`].
    pub pool: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthDomain {
    pub name: String,
    pub slots: Vec<SynthSlot>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub dialogues: usize,
    pub min_turns: usize,
    pub max_turns: usize,
    pub domains: Vec<SynthDomain>,
    /// Shared value pools; slots drawing from the same pool share candidates.
    pub pools: BTreeMap<String, Vec<String>>,
    /// Correlated `(source, target)` slot keys, e.g. `("hotel-pricerange", "restaurant-pricerange")`.
    pub pairs: Vec<(String, String)>,
    /// Probability that a pair's target copies the source value.
    pub rho: f64,
    /// Probability that a slot is part of a session's goal.
    pub fill_probability: f64,
    /// User templates with `{domain}`, `{slot}` and `{value}` placeholders.
    pub user_templates: Vec<String>,
    /// User turns that reveal nothing.
    pub filler_templates: Vec<String>,
    /// System templates; `{domain}` is filled with the last mentioned domain.
    pub system_templates: Vec<String>,
}

fn words(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

impl Default for SynthConfig {
    fn default() -> Self {
        let slot = |name: &str, pool: &str| SynthSlot {
            name: name.into(),
            pool: pool.into(),
        };
        let mut pools = BTreeMap::new();
        pools.insert("area".into(), words(&["north", "south", "centre"]));
        pools.insert("price".into(), words(&["cheap", "expensive"]));
        pools.insert("food".into(), words(&["italian", "indian", "chinese"]));
        pools.insert("hotelname".into(), words(&["demo hotel", "grand inn"]));
        pools.insert("time".into(), words(&["18 : 00", "9 : 30"]));
        Self {
            seed: 0,
            dialogues: 200,
            min_turns: 2,
            max_turns: 6,
            domains: vec![
                SynthDomain {
                    name: "hotel".into(),
                    slots: vec![slot("area", "area"), slot("pricerange", "price"), slot("name", "hotelname")],
                },
                SynthDomain {
                    name: "restaurant".into(),
                    slots: vec![slot("area", "area"), slot("pricerange", "price"), slot("food", "food")],
                },
                SynthDomain {
                    name: "attraction".into(),
                    slots: vec![slot("area", "area")],
                },
                SynthDomain {
                    name: "taxi".into(),
                    slots: vec![slot("leaveat", "time")],
                },
            ],
            pools,
            pairs: vec![
                ("hotel-pricerange".into(), "restaurant-pricerange".into()),
                ("hotel-area".into(), "restaurant-area".into()),
            ],
            rho: 0.9,
            fill_probability: 0.6,
            user_templates: words(&[
                "i am looking for a {domain} with {slot} {value}",
                "i want the {domain} {slot} to be {value}",
                "{value} for the {domain} {slot} please",
            ]),
            filler_templates: words(&["thank you", "can you help me", "that sounds good"]),
            system_templates: words(&["sure , anything else for the {domain} ?", "i have noted that", "ok , what else ?"]),
        }
    }
}

/// Generated ontology plus dialogues.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub ontology: Ontology,
    pub dialogues: Vec<Dialogue>,
}

struct Layout {
    ontology: Ontology,
    /// Pool values per slot, as indices into the global value list.
    pool_of: Vec<Vec<usize>>,
    /// `(source, target)` slot indices.
    pairs: Vec<(usize, usize)>,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho must be in [0, 1], got {}", self.rho));
        }
        if !(0.0..=1.0).contains(&self.fill_probability) {
            return bad(format!("fill_probability must be in [0, 1], got {}", self.fill_probability));
        }
        if self.min_turns == 0 || self.max_turns < self.min_turns {
            return bad(format!("turn range {}..={} is invalid", self.min_turns, self.max_turns));
        }
        if self.domains.is_empty() || self.domains.iter().any(|d| d.slots.is_empty()) {
            return bad("every domain needs at least one slot".into());
        }
        for d in &self.domains {
            for s in &d.slots {
                match self.pools.get(&s.pool) {
                    Some(p) if !p.is_empty() => {}
                    _ => return bad(format!("slot {}-{} uses missing or empty pool {:?}", d.name, s.name, s.pool)),
                }
            }
        }
        if self.user_templates.is_empty() || self.user_templates.iter().any(|t| !t.contains("{value}")) {
            return bad("user templates must exist and each must contain {value}".into());
        }
        if self.filler_templates.is_empty() || self.system_templates.is_empty() {
            return bad("filler and system templates must be non-empty".into());
        }
        Ok(())
    }

    fn layout(&self) -> Result<Layout> {
        self.validate()?;
        let mut values: Vec<String> = Vec::new();
        let mut index = BTreeMap::new();
        for pool in self.pools.values() {
            for v in pool {
                let v = normalize_value(v);
                if !index.contains_key(&v) {
                    index.insert(v.clone(), values.len());
                    values.push(v);
                }
            }
        }
        let mut slots = Vec::new();
        let mut pool_of = Vec::new();
        for d in &self.domains {
            for s in &d.slots {
                let cands: Vec<usize> = self.pools[&s.pool].iter().map(|v| index[&normalize_value(v)]).collect();
                slots.push(SlotSpec {
                    domain: d.name.clone(),
                    slot: s.name.clone(),
                    description: format!("{} {}", d.name, s.name),
                    candidates: cands.clone(),
                });
                pool_of.push(cands);
            }
        }
        let ontology = Ontology::new(self.domains.iter().map(|d| d.name.clone()).collect(), slots, values)
            .map_err(|e| Error::Config(e.to_string()))?;
        let mut pairs = Vec::new();
        for (a, b) in &self.pairs {
            let ia = ontology
                .slot_index(a)
                .ok_or_else(|| Error::Config(format!("pair references unknown slot {a}")))?;
            let ib = ontology
                .slot_index(b)
                .ok_or_else(|| Error::Config(format!("pair references unknown slot {b}")))?;
            if ia == ib {
                return Err(Error::Config(format!("pair ({a}, {b}) must name distinct slots")));
            }
            let sa: BTreeSet<_> = pool_of[ia].iter().collect();
            if !pool_of[ib].iter().any(|v| sa.contains(v)) {
                return Err(Error::Config(format!("paired slots {a} and {b} have disjoint candidate sets")));
            }
            pairs.push((ia, ib));
        }
        Ok(Layout {
            ontology,
            pool_of,
            pairs,
        })
    }
}

fn fill(template: &str, domain: &str, slot: &str, value: &str) -> String {
    normalize_value(
        &template
            .replace("{domain}", domain)
            .replace("{slot}", slot)
            .replace("{value}", value),
    )
}

/// Deterministic in `config.seed`.
pub fn generate_synthetic_corpus(config: &SynthConfig) -> Result<SynthCorpus> {
    let layout = config.layout()?;
    let o = &layout.ontology;
    let n = o.slot_count();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dialogues = Vec::with_capacity(config.dialogues);

    for d in 0..config.dialogues {
        // session goal
        let filled: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < config.fill_probability).collect();
        let mut goal: Vec<Option<usize>> = (0..n)
            .map(|i| filled[i].then(|| *layout.pool_of[i].choose(&mut rng).expect("non-empty pool")))
            .collect();
        for &(src, dst) in &layout.pairs {
            if let (Some(v), Some(_)) = (goal[src], goal[dst]) {
                if rng.random::<f64>() < config.rho && layout.pool_of[dst].contains(&v) {
                    goal[dst] = Some(v);
                }
            }
        }

        // reveal order
        let turns = rng.random_range(config.min_turns..=config.max_turns);
        let mut reveal: Vec<Vec<usize>> = vec![Vec::new(); turns];
        for (i, g) in goal.iter().enumerate() {
            if g.is_some() {
                reveal[rng.random_range(0..turns)].push(i);
            }
        }

        let mut state = BeliefState::empty(n);
        let mut last_domain = o.domains()[0].clone();
        let mut out_turns = Vec::with_capacity(turns);
        for slots in reveal {
            let user = if slots.is_empty() {
                config.filler_templates.choose(&mut rng).expect("validated").clone()
            } else {
                let parts: Vec<String> = slots
                    .iter()
                    .map(|&i| {
                        let spec = &o.slots()[i];
                        let value = &o.values()[goal[i].expect("revealed slots are filled")];
                        state.set(i, value);
                        last_domain = spec.domain.clone();
                        let t = config.user_templates.choose(&mut rng).expect("validated");
                        fill(t, &spec.domain, &spec.slot, value)
                    })
                    .collect();
                parts.join(" and also ")
            };
            let system_t = config.system_templates.choose(&mut rng).expect("validated");
            out_turns.push(Turn {
                user,
                system: fill(system_t, &last_domain, "", ""),
                state: state.clone(),
            });
        }
        dialogues.push(Dialogue {
            id: format!("synth-{:05}", d),
            turns: out_turns,
        });
    }
    Ok(SynthCorpus {
        ontology: layout.ontology,
        dialogues,
    })
}
