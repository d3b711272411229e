//! The tracker: one language model applied twice per sample.
//!
//! 1. `[H_t, <BOC>, slot prompt]` is run through the LM; the hidden states at
//!    the slot tokens are the slot features `X_s`.
//! 2. Value features `X_v` are mean token embeddings of each value.
//! 3. The graph stack turns `X_s` (plus `X_v` on the slot-value graph) into
//!    `G_t`, one row per slot.
//! 4. `[H_t, <BOS>, Y_t]` is run through the same LM and every position that
//!    predicts a value token of slot `i` sees `hidden ‖ G_t[i]` in the decode
//!    head; all other positions see `hidden ‖ 0`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lm::{LanguageModel, LmConfig};
use crate::data::{
    build_injection_alignment, max_state_len, parse_state, serialize_history, serialize_state, slot_prompt_string,
    BeliefState, Dialogue, Ontology, ParsedState, SlotPrompt, Special, Tokenizer,
};
use crate::error::{Error, Result};
use crate::graph::{build_topology, GatConfig, GatStack, GraphTopology, GraphType};
use crate::numeric::{Matrix, ParamStore, Tape, Var};

/// Mixed into the LM seed for the graph parameters, so the LM initialisation
/// is the same whichever graph is attached.
const GRAPH_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub lm: LmConfig,
    pub gat: GatConfig,
    /// Upper bound on generated tokens per value.
    pub max_value_tokens: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            lm: LmConfig::default(),
            gat: GatConfig::default(),
            max_value_tokens: 8,
        }
    }
}

impl TrackerConfig {
    /// `L{L}P{P}K{K}-{graph}`
    pub fn name(&self) -> String {
        self.gat.name()
    }

    pub fn validate(&self) -> Result<()> {
        self.lm.validate()?;
        self.gat.validate()?;
        if self.max_value_tokens == 0 {
            return Err(Error::Config("max_value_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// Language model, graph stack and the fixed token layouts they operate on.
#[derive(Clone, Debug)]
pub struct Tracker {
    config: TrackerConfig,
    ontology: Ontology,
    tokenizer: Tokenizer,
    store: ParamStore,
    lm: LanguageModel,
    gat: GatStack,
    topology: Option<GraphTopology>,
    prompt: SlotPrompt,
    descriptions: Vec<Vec<usize>>,
    value_tokens: Vec<Vec<usize>>,
    history_budget: usize,
}

impl Tracker {
    /// Freshly initialised tracker; deterministic in `config.lm.seed`.
    pub fn new(config: TrackerConfig, ontology: Ontology, tokenizer: Tokenizer) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.lm.seed);
        LanguageModel::init(&config.lm, tokenizer.vocab_size(), &mut store, &mut rng)?;
        let mut graph_rng = ChaCha8Rng::seed_from_u64(config.lm.seed ^ GRAPH_SEED_SALT);
        GatStack::init(&config.gat, config.lm.hidden, &mut store, "gat", &mut graph_rng)?;
        Self::from_store(config, ontology, tokenizer, store)
    }

    /// Binds a tracker to an existing parameter store (e.g. from a checkpoint).
    pub fn from_store(config: TrackerConfig, ontology: Ontology, tokenizer: Tokenizer, store: ParamStore) -> Result<Self> {
        config.validate()?;
        if tokenizer.slot_token_count() != ontology.slot_count() {
            return Err(Error::Config(format!(
                "tokenizer has {} slot tokens but the ontology has {} slots",
                tokenizer.slot_token_count(),
                ontology.slot_count()
            )));
        }
        for (i, s) in ontology.slots().iter().enumerate() {
            if tokenizer.token(tokenizer.slot_token(i)) != s.token() {
                return Err(Error::Config(format!(
                    "slot order differs: tokenizer slot {i} is {}, ontology has {}",
                    tokenizer.token(tokenizer.slot_token(i)),
                    s.token()
                )));
            }
        }
        let lm = LanguageModel::attach(&config.lm, tokenizer.vocab_size(), &store)?;
        let gat = GatStack::attach(&config.gat, config.lm.hidden, &store, "gat")?;
        let topology = build_topology(config.gat.graph_type, &ontology)?;
        let prompt = slot_prompt_string(&ontology, &tokenizer);
        let encode_checked = |text: &str, what: &str| -> Result<Vec<usize>> {
            let ids = tokenizer.encode(text);
            if ids.is_empty() || ids.contains(&Special::Unk.id()) {
                return Err(Error::Data(format!("{what} {text:?} does not tokenize")));
            }
            Ok(ids)
        };
        let descriptions = ontology
            .slots()
            .iter()
            .map(|s| encode_checked(&s.description, "slot description"))
            .collect::<Result<Vec<_>>>()?;
        let value_tokens = ontology
            .values()
            .iter()
            .map(|v| encode_checked(v, "value"))
            .collect::<Result<Vec<_>>>()?;

        let longest_state = max_state_len(&ontology, &tokenizer, config.max_value_tokens);
        let fixed = longest_state.max(prompt.tokens.len() + 1);
        if fixed >= config.lm.context {
            return Err(Error::Config(format!(
                "context {} leaves no room for history (state/prompt need {fixed} tokens)",
                config.lm.context
            )));
        }
        Ok(Self {
            history_budget: config.lm.context - fixed,
            config,
            ontology,
            tokenizer,
            store,
            lm,
            gat,
            topology,
            prompt,
            descriptions,
            value_tokens,
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    pub fn config_name(&self) -> String {
        self.config.name()
    }

    pub fn ontology(&self) -> &Ontology {
        &self.ontology
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn language_model(&self) -> &LanguageModel {
        &self.lm
    }

    pub fn graph_stack(&self) -> &GatStack {
        &self.gat
    }

    pub fn topology(&self) -> Option<&GraphTopology> {
        self.topology.as_ref()
    }

    pub fn slot_prompt(&self) -> &SlotPrompt {
        &self.prompt
    }

    /// Tokens of history kept before truncation kicks in.
    pub fn history_budget(&self) -> usize {
        self.history_budget
    }

    pub fn history(&self, dialogue: &Dialogue, t: usize) -> Result<Vec<usize>> {
        serialize_history(dialogue, t, &self.tokenizer, Some(self.history_budget))
    }

    /// `X_s`: hidden states at the slot tokens of `[H_t, <BOC>, prompt]`.
    pub fn pre_extract_slot_features(&self, store: &ParamStore, tape: &mut Tape, history: &[usize]) -> Result<Var> {
        let mut seq = history.to_vec();
        seq.push(Special::Boc.id());
        let offset = seq.len();
        seq.extend(&self.prompt.tokens);
        let hidden = self.lm.causal_forward(store, tape, &seq)?;
        let rows: Vec<Option<usize>> = self.prompt.positions.iter().map(|&p| Some(offset + p)).collect();
        tape.select_rows(hidden, &rows)
    }

    /// `X_v`: mean token embedding of every ontology value (`N_v × h`).
    pub fn value_embeddings(&self, store: &ParamStore, tape: &mut Tape) -> Result<Var> {
        let flat: Vec<Option<usize>> = self.value_tokens.iter().flatten().map(|&t| Some(t)).collect();
        let mut avg = Matrix::zeros(self.value_tokens.len(), flat.len());
        let mut col = 0;
        for (v, toks) in self.value_tokens.iter().enumerate() {
            for _ in toks {
                avg.set(v, col, 1.0 / toks.len() as f64);
                col += 1;
            }
        }
        let emb = tape.param(store, self.lm.token_embedding());
        let rows = tape.select_rows(emb, &flat)?;
        let avg = tape.constant(avg);
        tape.matmul(avg, rows)
    }

    /// `G_t` (`N_ds × h`), or `None` for the graph-free baseline.
    pub fn graph_features(&self, store: &ParamStore, tape: &mut Tape, history: &[usize]) -> Result<Option<Var>> {
        let Some(topology) = &self.topology else {
            return Ok(None);
        };
        if self.gat.layer_count() == 0 {
            return Ok(None);
        }
        let slots = self.pre_extract_slot_features(store, tape, history)?;
        let x = match self.config.gat.graph_type {
            GraphType::DsvGraph => {
                let values = self.value_embeddings(store, tape)?;
                tape.concat_rows(&[slots, values])?
            }
            _ => slots,
        };
        let s = tape.constant(topology.adjacency().clone());
        let out = self.gat.forward(store, tape, x, s)?;
        let n_ds = topology.check_slot_prefix()?;
        Ok(Some(tape.slice_rows(out, 0, n_ds)?))
    }

    /// Decode-head logits: row `p` uses `hidden_p ‖ G_t[alignment[p]]`, or
    /// `hidden_p ‖ 0` when the alignment is `None` or there is no graph.
    pub fn decode_with_injection(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        hidden: Var,
        graph: Option<Var>,
        alignment: &[Option<usize>],
    ) -> Result<Var> {
        let (rows, h) = tape.shape(hidden);
        if alignment.len() != rows {
            return Err(Error::Contract(format!(
                "alignment covers {} positions, hidden has {rows}",
                alignment.len()
            )));
        }
        let n_ds = self.ontology.slot_count();
        if let Some(i) = alignment.iter().flatten().find(|&&i| i >= n_ds) {
            return Err(Error::Contract(format!("alignment slot {i} out of range for {n_ds} slots")));
        }
        let injected = match graph {
            Some(g) => tape.select_rows(g, alignment)?,
            None => tape.constant(Matrix::zeros(rows, h)),
        };
        self.lm.head(store, tape, hidden, injected)
    }

    /// Mean cross-entropy over the target state of turn `t`. `None` when the
    /// sample does not fit the context and is skipped.
    pub fn sample_loss(&self, store: &ParamStore, tape: &mut Tape, dialogue: &Dialogue, t: usize) -> Result<Option<Var>> {
        let history = self.history(dialogue, t)?;
        let target = serialize_state(dialogue.state_at(t), &self.ontology, &self.tokenizer);
        if history.len() + target.len() > self.config.lm.context {
            log::warn!(
                "skipping {} turn {t}: {} history + {} target tokens exceed context {}",
                dialogue.id,
                history.len(),
                target.len(),
                self.config.lm.context
            );
            return Ok(None);
        }
        let alignment = build_injection_alignment(&target, &self.ontology, &self.tokenizer)?;
        let graph = self.graph_features(store, tape, &history)?;

        let mut seq = history.clone();
        seq.push(Special::Bos.id());
        seq.extend(&target[..target.len() - 1]);
        let hidden = self.lm.causal_forward(store, tape, &seq)?;
        let predicting = tape.slice_rows(hidden, history.len(), seq.len())?;
        let logits = self.decode_with_injection(store, tape, predicting, graph, alignment.as_slice())?;
        Ok(Some(tape.cross_entropy(logits, &target)?))
    }

    /// Constrained greedy decoding of the state at turn `t`.
    ///
    /// Slot descriptions, `<SEP>` after the length limit, and the final `<EOS>`
    /// are forced. Value tokens are chosen among non-reserved tokens; `<SEP>`
    /// becomes available after the first value token.
    ///
    /// Training targets align value tokens with `G_t[i]` and `<SEP>` with the
    /// zero vector, so each step reads both heads: the value ends when the
    /// zero-injected head prefers `<SEP>` over every value token, otherwise the
    /// injected head picks the next value token.
    pub fn decode_state(&self, dialogue: &Dialogue, t: usize) -> Result<ParsedState> {
        let history = self.history(dialogue, t)?;
        let store = &self.store;
        let mut graph_tape = Tape::new();
        let graph = self.graph_features(store, &mut graph_tape, &history)?;
        let graph_rows = graph.map(|g| graph_tape.value(g).clone());
        let h = self.lm.hidden();

        let first_free = Special::ALL.len() + self.tokenizer.slot_token_count();
        let mut seq = history.clone();
        seq.push(Special::Bos.id());
        let mut output = Vec::new();
        for (i, desc) in self.descriptions.iter().enumerate() {
            seq.extend(desc);
            output.extend(desc);
            let injected = match &graph_rows {
                Some(g) => Matrix::concat_rows(&[&g.slice_rows(i, i + 1)?, &Matrix::zeros(1, h)])?,
                None => Matrix::zeros(2, h),
            };
            for step in 0..self.config.max_value_tokens {
                let mut tape = Tape::new();
                let hidden = self.lm.causal_forward(store, &mut tape, &seq)?;
                let last = tape.select_rows(hidden, &[Some(seq.len() - 1), Some(seq.len() - 1)])?;
                let inj = tape.constant(injected.clone());
                let logits = self.lm.head(store, &mut tape, last, inj)?;
                let logits = tape.value(logits);
                let best_value = |row: &[f64]| {
                    row.iter()
                        .enumerate()
                        .skip(first_free)
                        .fold((f64::NEG_INFINITY, first_free), |b, (id, &s)| if s > b.0 { (s, id) } else { b })
                };
                if step > 0 {
                    let plain = logits.row(1);
                    if plain[Special::Sep.id()] >= best_value(plain).0 {
                        break;
                    }
                }
                let (_, token) = best_value(logits.row(0));
                seq.push(token);
                output.push(token);
            }
            seq.push(Special::Sep.id());
            output.push(Special::Sep.id());
        }
        output.push(Special::Eos.id());
        Ok(parse_state(&output, &self.ontology, &self.tokenizer))
    }

    /// Like [`Tracker::decode_state`] but never fails: errors become a warning
    /// and an all-`none` state.
    pub fn predict_state(&self, dialogue: &Dialogue, t: usize) -> ParsedState {
        self.decode_state(dialogue, t).unwrap_or_else(|e| ParsedState {
            state: BeliefState::empty(self.ontology.slot_count()),
            warnings: vec![format!("decoding failed: {e}")],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, Turn};
    use crate::graph::GraphType;

    fn toy() -> (Ontology, Vec<Dialogue>) {
        let ontology = Ontology::from_json(
            r#"{"domains":["hotel","taxi"],
                "slots":[{"domain":"hotel","slot":"name","candidates":["demo hotel","grand inn"]},
                         {"domain":"hotel","slot":"area","candidates":["north","south"]},
                         {"domain":"taxi","slot":"departure","candidates":["18 : 00","grand inn"]}],
                "values":["demo hotel","grand inn","north","south","18 : 00"]}"#,
            "toy",
        )
        .unwrap();
        let state = |vals: &[&str]| BeliefState::from_values(vals.iter().map(|v| v.to_string()).collect());
        let d = Dialogue {
            id: "toy".into(),
            turns: vec![
                Turn {
                    user: "i need the demo hotel".into(),
                    system: "which area ?".into(),
                    state: state(&["demo hotel", "none", "none"]),
                },
                Turn {
                    user: "north please and a taxi at 18 : 00".into(),
                    system: "booked".into(),
                    state: state(&["demo hotel", "north", "18 : 00"]),
                },
            ],
        };
        (ontology, vec![d])
    }

    fn tracker(graph_type: GraphType, hidden: usize) -> Tracker {
        let (o, corpus) = toy();
        let tok = build_vocab(&corpus, &o);
        let gat = match graph_type {
            GraphType::NoGraph => GatConfig::no_graph(),
            g => GatConfig {
                graph_type: g,
                layers: 1,
                heads: 1,
                hops: 2,
                ..Default::default()
            },
        };
        let cfg = TrackerConfig {
            lm: LmConfig {
                hidden,
                layers: 1,
                heads: 2,
                context: 64,
                ..Default::default()
            },
            gat,
            max_value_tokens: 4,
        };
        Tracker::new(cfg, o, tok).unwrap()
    }

    #[test]
    fn slot_features_have_one_row_per_slot() {
        let t = tracker(GraphType::DsvGraph, 8);
        let (_, corpus) = toy();
        let mut tape = Tape::new();
        let h1 = t.history(&corpus[0], 1).unwrap();
        let h2 = t.history(&corpus[0], 2).unwrap();
        let x1 = t.pre_extract_slot_features(t.store(), &mut tape, &h1).unwrap();
        let x2 = t.pre_extract_slot_features(t.store(), &mut tape, &h2).unwrap();
        assert_eq!(tape.shape(x1), (3, 8));
        assert_ne!(tape.value(x1), tape.value(x2));

        // row i is the hidden state at slot i's token
        let mut seq = h1.clone();
        seq.push(Special::Boc.id());
        let off = seq.len();
        seq.extend(&t.slot_prompt().tokens);
        let hidden = t.language_model().causal_forward(t.store(), &mut tape, &seq).unwrap();
        let p = t.slot_prompt().positions[2];
        assert_eq!(tape.value(x1).row(2), tape.value(hidden).row(off + p));
    }

    #[test]
    fn value_embeddings_average_tokens() {
        let t = tracker(GraphType::DsvGraph, 8);
        let mut tape = Tape::new();
        let xv = t.value_embeddings(t.store(), &mut tape).unwrap();
        let emb = t.store().get(t.language_model().token_embedding());
        let tok = t.tokenizer();
        let north = tok.id("north").unwrap();
        assert_eq!(tape.value(xv).row(2), emb.row(north));
        let (demo, hotel) = (tok.id("demo").unwrap(), tok.id("hotel").unwrap());
        for c in 0..8 {
            let expected = (emb.get(demo, c) + emb.get(hotel, c)) / 2.0;
            assert!((tape.value(xv).get(0, c) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn injection_is_local_to_aligned_positions() {
        let t = tracker(GraphType::DsGraph, 8);
        let store = t.store();
        let mut tape = Tape::new();
        let hidden = tape.constant(Matrix::random_normal(
            5,
            8,
            1.0,
            &mut ChaCha8Rng::seed_from_u64(3),
        ));
        let align = [None, Some(0), Some(1), None, Some(0)];
        let g = tape.constant(Matrix::zeros(3, 8));
        let zero_g = t.decode_with_injection(store, &mut tape, hidden, Some(g), &align).unwrap();
        let baseline = t.decode_with_injection(store, &mut tape, hidden, None, &align).unwrap();
        assert_eq!(tape.value(zero_g), tape.value(baseline));
        assert_eq!(tape.shape(zero_g), (5, t.tokenizer().vocab_size()));

        let mut bumped = Matrix::zeros(3, 8);
        bumped.row_mut(1).fill(1.0);
        let g2 = tape.constant(bumped);
        let changed = t.decode_with_injection(store, &mut tape, hidden, Some(g2), &align).unwrap();
        for p in 0..5 {
            let same = tape.value(changed).row(p) == tape.value(baseline).row(p);
            assert_eq!(same, p != 2, "position {p}");
        }
        assert!(t.decode_with_injection(store, &mut tape, hidden, Some(g), &[Some(3); 5]).is_err());
    }

    #[test]
    fn untrained_model_emits_well_formed_states() {
        let (_, corpus) = toy();
        for g in [GraphType::NoGraph, GraphType::DsGraph, GraphType::DsvGraph] {
            let t = tracker(g, 8);
            for turn in 1..=2 {
                let p = t.predict_state(&corpus[0], turn);
                assert!(p.warnings.is_empty(), "{:?}", p.warnings);
                assert_eq!(p.state.len(), 3);
            }
            let mut tape = Tape::new();
            let loss = t.sample_loss(t.store(), &mut tape, &corpus[0], 2).unwrap().unwrap();
            assert!(tape.value(loss).get(0, 0) > 0.0);
        }
    }

    #[test]
    fn lm_init_does_not_depend_on_graph_type() {
        let a = tracker(GraphType::NoGraph, 8);
        let b = tracker(GraphType::DsvGraph, 8);
        let id = a.language_model().head_weight();
        assert_eq!(a.store().get(id), b.store().get(b.language_model().head_weight()));
        assert_eq!(a.graph_stack().param_ids().len(), 0);
        assert_eq!(b.graph_stack().param_ids().len(), 3);
    }
}
