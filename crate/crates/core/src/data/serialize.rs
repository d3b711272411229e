//! Token layouts shared by training and decoding.
//!
//! * history: `u_t <SYS> s_{t-1} <USR> u_{t-1} ... <SYS> s_1 <USR> u_1`
//! * slot prompt: `hotel name <hotel-name> taxi departure <taxi-departure> ...`
//! * state: `hotel name demo hotel <SEP> taxi departure 18 : 00 <SEP> ... <EOS>`

use super::dialogue::{BeliefState, Dialogue};
use super::ontology::Ontology;
use super::tokenizer::{Special, Tokenizer};
use crate::error::{Error, Result};

/// Dialogue history at 1-based turn `t`, most recent first.
///
/// With `budget`, whole older turns are dropped from the oldest end until the
/// sequence fits. The current user utterance is always kept; if it alone is
/// longer than the budget only its last `budget` tokens survive.
pub fn serialize_history(
    dialogue: &Dialogue,
    t: usize,
    tokenizer: &Tokenizer,
    budget: Option<usize>,
) -> Result<Vec<usize>> {
    if t == 0 || t > dialogue.len() {
        return Err(Error::Data(format!(
            "turn {t} out of range for dialogue {} with {} turns",
            dialogue.id,
            dialogue.len()
        )));
    }
    let budget = budget.unwrap_or(usize::MAX);
    let mut out = tokenizer.encode(&dialogue.turns[t - 1].user);
    if out.len() > budget {
        out.drain(..out.len() - budget);
        return Ok(out);
    }
    for k in (1..t).rev() {
        let turn = &dialogue.turns[k - 1];
        let mut seg = vec![Special::Sys.id()];
        seg.extend(tokenizer.encode(&turn.system));
        seg.push(Special::Usr.id());
        seg.extend(tokenizer.encode(&turn.user));
        if out.len() + seg.len() > budget {
            break;
        }
        out.extend(seg);
    }
    Ok(out)
}

/// The fixed slot prompt and the position of each slot's dedicated token in it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotPrompt {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
}

pub fn slot_prompt_string(ontology: &Ontology, tokenizer: &Tokenizer) -> SlotPrompt {
    let mut tokens = Vec::new();
    let mut positions = Vec::with_capacity(ontology.slot_count());
    for (i, s) in ontology.slots().iter().enumerate() {
        tokens.extend(tokenizer.encode(&s.description));
        positions.push(tokens.len());
        tokens.push(tokenizer.slot_token(i));
    }
    SlotPrompt { tokens, positions }
}

pub fn serialize_state(state: &BeliefState, ontology: &Ontology, tokenizer: &Tokenizer) -> Vec<usize> {
    let mut out = Vec::new();
    for (i, s) in ontology.slots().iter().enumerate() {
        out.extend(tokenizer.encode(&s.description));
        out.extend(tokenizer.encode(state.get(i)));
        out.push(Special::Sep.id());
    }
    out.push(Special::Eos.id());
    out
}

/// Result of parsing model output; `warnings` lists every repair made.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedState {
    pub state: BeliefState,
    pub warnings: Vec<String>,
}

/// Inverse of [`serialize_state`], tolerant of malformed output. Never fails:
/// missing slots become `none`, unrecognised or duplicate segments are dropped,
/// and each repair is recorded as a warning.
pub fn parse_state(tokens: &[usize], ontology: &Ontology, tokenizer: &Tokenizer) -> ParsedState {
    let mut warnings = Vec::new();
    let sep = Special::Sep.id();
    let eos = Special::Eos.id();

    let body = match tokens.iter().position(|&t| t == eos) {
        Some(p) => {
            if p + 1 < tokens.len() {
                warnings.push(format!("{} tokens after <EOS> ignored", tokens.len() - p - 1));
            }
            &tokens[..p]
        }
        None => {
            warnings.push("missing <EOS>".to_string());
            tokens
        }
    };

    let descriptions: Vec<Vec<usize>> = ontology
        .slots()
        .iter()
        .map(|s| tokenizer.encode(&s.description))
        .collect();
    let n = ontology.slot_count();
    let mut state = BeliefState::empty(n);
    let mut seen = vec![false; n];
    let mut expected = 0;

    let mut segments: Vec<&[usize]> = body.split(|&t| t == sep).collect();
    if segments.last().is_some_and(|s| s.is_empty()) {
        segments.pop();
    }
    for seg in segments {
        if seg.is_empty() {
            warnings.push("empty segment".to_string());
            continue;
        }
        let matched = if expected < n && seg.starts_with(&descriptions[expected]) {
            Some(expected)
        } else {
            (0..n)
                .filter(|&i| seg.starts_with(&descriptions[i]))
                .max_by_key(|&i| (descriptions[i].len(), usize::MAX - i))
        };
        let Some(slot) = matched else {
            warnings.push(format!("unrecognised segment {:?}", tokenizer.decode(seg)));
            continue;
        };
        if seen[slot] {
            warnings.push(format!("duplicate segment for {}", ontology.slots()[slot].key()));
            continue;
        }
        seen[slot] = true;
        let value = &seg[descriptions[slot].len()..];
        if value.is_empty() {
            warnings.push(format!("empty value for {}", ontology.slots()[slot].key()));
        } else {
            state.set(slot, &tokenizer.decode(value));
        }
        expected = slot + 1;
    }
    for (i, s) in seen.iter().enumerate() {
        if !s {
            warnings.push(format!("missing slot {}", ontology.slots()[i].key()));
        }
    }
    ParsedState { state, warnings }
}

/// For each position of a serialized state, which slot's value (if any) the
/// token belongs to. Position `j` describes the prediction of token `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InjectionAlignment(pub Vec<Option<usize>>);

impl InjectionAlignment {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[Option<usize>] {
        &self.0
    }
}

/// Maps every target position inside slot `i`'s value span to `i`; slot
/// descriptions, `<SEP>` and `<EOS>` map to `None`.
///
/// Fails on targets that do not follow the serialized-state layout exactly.
pub fn build_injection_alignment(
    target: &[usize],
    ontology: &Ontology,
    tokenizer: &Tokenizer,
) -> Result<InjectionAlignment> {
    let mut out = Vec::with_capacity(target.len());
    let mut pos = 0;
    let malformed = |why: String| Error::Data(format!("malformed state target: {why}"));
    for (i, s) in ontology.slots().iter().enumerate() {
        let desc = tokenizer.encode(&s.description);
        if !target[pos..].starts_with(&desc) {
            return Err(malformed(format!("expected description of {} at {pos}", s.key())));
        }
        out.extend(std::iter::repeat_n(None, desc.len()));
        pos += desc.len();
        let start = pos;
        while pos < target.len() && target[pos] != Special::Sep.id() {
            if tokenizer.is_reserved(target[pos]) {
                return Err(malformed(format!("reserved token inside value of {}", s.key())));
            }
            out.push(Some(i));
            pos += 1;
        }
        if pos == start || pos == target.len() {
            return Err(malformed(format!("value of {} is empty or unterminated", s.key())));
        }
        out.push(None);
        pos += 1;
    }
    if target.get(pos) != Some(&Special::Eos.id()) || pos + 1 != target.len() {
        return Err(malformed("expected a single trailing <EOS>".into()));
    }
    out.push(None);
    Ok(InjectionAlignment(out))
}

/// Longest possible serialized state when every value has at most
/// `max_value_tokens` tokens.
pub fn max_state_len(ontology: &Ontology, tokenizer: &Tokenizer, max_value_tokens: usize) -> usize {
    ontology
        .slots()
        .iter()
        .map(|s| tokenizer.encode(&s.description).len() + max_value_tokens + 1)
        .sum::<usize>()
        + 1
}
