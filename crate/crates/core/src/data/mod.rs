//! Ontology, dialogues, tokenizer, serialization formats and corpus generation.

mod dialogue;
mod ontology;
mod serialize;
mod synth;
mod tokenizer;

pub use dialogue::{
    dialogue_from_json, dialogue_to_json, last_turn_filter, load_corpus, save_corpus, turn_samples, BeliefState,
    Dialogue, SampleRef, SupervisionStats, Turn,
};
pub use ontology::{normalize_value, Ontology, SlotSpec, NONE_VALUE};
pub use serialize::{
    build_injection_alignment, max_state_len, parse_state, serialize_history, serialize_state, slot_prompt_string,
    InjectionAlignment, ParsedState, SlotPrompt,
};
pub use synth::{generate_synthetic_corpus, SynthConfig, SynthCorpus, SynthDomain, SynthSlot};
pub use tokenizer::{build_vocab, Special, Tokenizer};
