use std::collections::{BTreeSet, HashMap};

use super::dialogue::Dialogue;
use super::ontology::{Ontology, NONE_VALUE};
use crate::error::{Error, Result};

/// Reserved tokens, in id order starting at 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Special {
    Pad,
    Unk,
    Usr,
    Sys,
    Boc,
    Bos,
    Sep,
    Eos,
}

impl Special {
    pub const ALL: [Special; 8] = [
        Special::Pad,
        Special::Unk,
        Special::Usr,
        Special::Sys,
        Special::Boc,
        Special::Bos,
        Special::Sep,
        Special::Eos,
    ];

    pub fn text(self) -> &'static str {
        match self {
            Special::Pad => "<PAD>",
            Special::Unk => "<UNK>",
            Special::Usr => "<USR>",
            Special::Sys => "<SYS>",
            Special::Boc => "<BOC>",
            Special::Bos => "<BOS>",
            Special::Sep => "<SEP>",
            Special::Eos => "<EOS>",
        }
    }

    pub fn id(self) -> usize {
        self as usize
    }
}

/// Whitespace tokenizer with a closed vocabulary. Special tokens and one token
/// per domain-slot occupy the lowest ids and are never split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    slot_tokens: usize,
}

impl Tokenizer {
    /// Rebuilds a tokenizer from its id-ordered token list (as stored in
    /// checkpoints). The list must start with the special tokens.
    pub fn from_tokens(tokens: Vec<String>, slot_tokens: usize) -> Result<Self> {
        for (i, s) in Special::ALL.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(s.text()) {
                return Err(Error::Checkpoint(format!("vocabulary id {i} must be {}", s.text())));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Checkpoint(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self {
            tokens,
            index,
            slot_tokens,
        })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn slot_token_count(&self) -> usize {
        self.slot_tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn special(&self, s: Special) -> usize {
        s.id()
    }

    /// Id of slot `i`'s dedicated token.
    pub fn slot_token(&self, slot: usize) -> usize {
        Special::ALL.len() + slot
    }

    /// True for special and slot tokens, which never appear inside values.
    pub fn is_reserved(&self, id: usize) -> bool {
        id < Special::ALL.len() + self.slot_tokens
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| self.index.get(w).copied().unwrap_or(Special::Unk.id()))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.tokens[i].as_str()).collect::<Vec<_>>().join(" ")
    }
}

/// Builds the vocabulary: specials, slot tokens in ontology order, then every
/// word of the corpus, slot descriptions, values and `none`, sorted.
pub fn build_vocab(corpus: &[Dialogue], ontology: &Ontology) -> Tokenizer {
    let mut words = BTreeSet::new();
    let mut add = |text: &str| {
        for w in text.split_whitespace() {
            words.insert(w.to_string());
        }
    };
    for d in corpus {
        for t in &d.turns {
            add(&t.user);
            add(&t.system);
            for v in t.state.values() {
                add(v);
            }
        }
    }
    for s in ontology.slots() {
        add(&s.description);
    }
    for v in ontology.values() {
        add(v);
    }
    add(NONE_VALUE);

    let mut tokens: Vec<String> = Special::ALL.iter().map(|s| s.text().to_string()).collect();
    tokens.extend(ontology.slots().iter().map(|s| s.token()));
    for w in words {
        if !tokens.contains(&w) {
            tokens.push(w);
        }
    }
    Tokenizer::from_tokens(tokens, ontology.slot_count()).expect("fresh vocabulary is well-formed")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BeliefState, Turn};

    fn ontology() -> Ontology {
        Ontology::from_json(
            r#"{"domains":["hotel","taxi"],
                "slots":[{"domain":"hotel","slot":"name","candidates":["demo hotel"]},
                         {"domain":"hotel","slot":"area","candidates":["north"]},
                         {"domain":"taxi","slot":"departure","candidates":["18 : 00"]},
                         {"domain":"taxi","slot":"arriveby","candidates":[]}],
                "values":["demo hotel","north","18 : 00"]}"#,
            "t",
        )
        .unwrap()
    }

    #[test]
    fn vocabulary_layout() {
        let o = ontology();
        let words: Vec<String> = (0..50).map(|i| format!("w{i}")).collect();
        let corpus = vec![Dialogue {
            id: "d".into(),
            turns: vec![Turn {
                user: words.join(" "),
                system: "w1 w2".into(),
                state: BeliefState::empty(4),
            }],
        }];
        let tok = build_vocab(&corpus, &o);
        assert!(tok.vocab_size() >= 50 + 8 + 4);
        assert_eq!(tok.id("<PAD>"), Some(0));
        assert_eq!(tok.slot_token(0), tok.id("<hotel-name>").unwrap());
        assert_eq!(tok.slot_token(3), tok.id("<taxi-arriveby>").unwrap());
        for v in o.values() {
            assert!(!tok.encode(v).contains(&Special::Unk.id()), "{v}");
        }
        assert_eq!(tok, build_vocab(&corpus, &o));
    }

    #[test]
    fn round_trip_and_unknowns() {
        let tok = build_vocab(&[], &ontology());
        let text = "<USR> hotel name demo hotel <SEP> <taxi-departure>";
        assert_eq!(tok.decode(&tok.encode(text)), text);
        assert_eq!(tok.encode("zebra"), vec![Special::Unk.id()]);
    }
}
