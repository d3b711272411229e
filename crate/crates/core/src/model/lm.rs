//! A small pre-norm causal transformer trained from scratch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Matrix, ParamGroupKind, ParamId, ParamStore, Tape, Var};

/// Language-model architecture.
///
/// Weights are drawn from `N(0, init_std²)`; the two residual output
/// projections of each block are further scaled by `1/sqrt(2·layers)`.
/// Layer-norm gains start at one and every bias at zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    /// Maximum sequence length (learned positional embeddings).
    pub context: usize,
    pub ff_multiplier: usize,
    pub seed: u64,
    pub init_std: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            hidden: 32,
            context: 192,
            ff_multiplier: 2,
            seed: 0,
            init_std: 0.1,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(format!(
                "hidden size {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            ));
        }
        if self.context == 0 || self.ff_multiplier == 0 {
            return bad("context and ff_multiplier must be positive".into());
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad(format!("init_std must be positive, got {}", self.init_std));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Block {
    ln1: (ParamId, ParamId),
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2: (ParamId, ParamId),
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Parameter handles of the language model inside a [`ParamStore`].
///
/// The decode head maps `2h → vocab`: the hidden state concatenated with an
/// `h`-dimensional injected feature (zeros when nothing is injected).
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel {
    config: LmConfig,
    vocab: usize,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: (ParamId, ParamId),
    head_w: ParamId,
    head_b: ParamId,
}

/// Shapes of every language-model parameter, in registration order.
fn layout(config: &LmConfig, vocab: usize) -> Vec<(String, (usize, usize))> {
    let h = config.hidden;
    let ff = h * config.ff_multiplier;
    let mut out = vec![("lm.tok_emb".to_string(), (vocab, h)), ("lm.pos_emb".to_string(), (config.context, h))];
    for l in 0..config.layers {
        let p = format!("lm.block{l}");
        out.extend([
            (format!("{p}.ln1.gain"), (1, h)),
            (format!("{p}.ln1.bias"), (1, h)),
            (format!("{p}.attn.wq"), (h, h)),
            (format!("{p}.attn.wk"), (h, h)),
            (format!("{p}.attn.wv"), (h, h)),
            (format!("{p}.attn.wo"), (h, h)),
            (format!("{p}.ln2.gain"), (1, h)),
            (format!("{p}.ln2.bias"), (1, h)),
            (format!("{p}.ff.w1"), (h, ff)),
            (format!("{p}.ff.b1"), (1, ff)),
            (format!("{p}.ff.w2"), (ff, h)),
            (format!("{p}.ff.b2"), (1, h)),
        ]);
    }
    out.extend([
        ("lm.ln_f.gain".to_string(), (1, h)),
        ("lm.ln_f.bias".to_string(), (1, h)),
        ("lm.head.weight".to_string(), (2 * h, vocab)),
        ("lm.head.bias".to_string(), (1, vocab)),
    ]);
    out
}

impl LanguageModel {
    /// Registers freshly initialised parameters; deterministic in `rng`.
    pub fn init<R: Rng + ?Sized>(config: &LmConfig, vocab: usize, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let residual_std = config.init_std / ((2 * config.layers.max(1)) as f64).sqrt();
        for (name, (r, c)) in layout(config, vocab) {
            let value = if name.ends_with(".gain") {
                Matrix::filled(r, c, 1.0)
            } else if name.ends_with("bias") || name.ends_with(".b1") || name.ends_with(".b2") {
                Matrix::zeros(r, c)
            } else if name.ends_with(".wo") || name.ends_with(".w2") {
                Matrix::random_normal(r, c, residual_std, rng)
            } else {
                Matrix::random_normal(r, c, config.init_std, rng)
            };
            store.add(name, value, ParamGroupKind::LanguageModel);
        }
        Self::attach(config, vocab, store)
    }

    /// Binds to parameters already present in `store` by name, checking shapes.
    pub fn attach(config: &LmConfig, vocab: usize, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let shapes: std::collections::HashMap<String, (usize, usize)> = layout(config, vocab).into_iter().collect();
        let id = |name: String| -> Result<ParamId> {
            let id = store
                .lookup(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            let expected = shapes[&name];
            if store.get(id).shape() != expected {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {expected:?}",
                    store.get(id).shape()
                )));
            }
            Ok(id)
        };
        let blocks = (0..config.layers)
            .map(|l| {
                let p = format!("lm.block{l}");
                Ok(Block {
                    ln1: (id(format!("{p}.ln1.gain"))?, id(format!("{p}.ln1.bias"))?),
                    wq: id(format!("{p}.attn.wq"))?,
                    wk: id(format!("{p}.attn.wk"))?,
                    wv: id(format!("{p}.attn.wv"))?,
                    wo: id(format!("{p}.attn.wo"))?,
                    ln2: (id(format!("{p}.ln2.gain"))?, id(format!("{p}.ln2.bias"))?),
                    w1: id(format!("{p}.ff.w1"))?,
                    b1: id(format!("{p}.ff.b1"))?,
                    w2: id(format!("{p}.ff.w2"))?,
                    b2: id(format!("{p}.ff.b2"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            vocab,
            tok_emb: id("lm.tok_emb".into())?,
            pos_emb: id("lm.pos_emb".into())?,
            blocks,
            ln_f: (id("lm.ln_f.gain".into())?, id("lm.ln_f.bias".into())?),
            head_w: id("lm.head.weight".into())?,
            head_b: id("lm.head.bias".into())?,
        })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn token_embedding(&self) -> ParamId {
        self.tok_emb
    }

    pub fn head_weight(&self) -> ParamId {
        self.head_w
    }

    pub fn head_bias(&self) -> ParamId {
        self.head_b
    }

    /// Final-layer hidden states (`len × h`) for `tokens`.
    pub fn causal_forward(&self, store: &ParamStore, tape: &mut Tape, tokens: &[usize]) -> Result<Var> {
        let n = tokens.len();
        if n == 0 {
            return Err(Error::Contract("causal_forward needs at least one token".into()));
        }
        if n > self.config.context {
            return Err(Error::Contract(format!(
                "sequence of {n} tokens exceeds context {}",
                self.config.context
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.vocab) {
            return Err(Error::Contract(format!("token id {t} outside vocabulary of {}", self.vocab)));
        }
        let h = self.config.hidden;
        let dh = h / self.config.heads;
        let emb = tape.param(store, self.tok_emb);
        let rows: Vec<Option<usize>> = tokens.iter().map(|&t| Some(t)).collect();
        let tok = tape.select_rows(emb, &rows)?;
        let pos_all = tape.param(store, self.pos_emb);
        let pos = tape.slice_rows(pos_all, 0, n)?;
        let mut x = tape.add(tok, pos)?;

        let mut mask = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                mask.set(i, j, 1.0);
            }
        }
        let mask = tape.constant(mask);
        let scale = 1.0 / (dh as f64).sqrt();

        for b in &self.blocks {
            let g = tape.param(store, b.ln1.0);
            let beta = tape.param(store, b.ln1.1);
            let a = tape.layer_norm(x, g, beta)?;
            let wq = tape.param(store, b.wq);
            let wk = tape.param(store, b.wk);
            let wv = tape.param(store, b.wv);
            let q = tape.matmul(a, wq)?;
            let k = tape.matmul(a, wk)?;
            let v = tape.matmul(a, wv)?;
            let mut heads = Vec::with_capacity(self.config.heads);
            for hd in 0..self.config.heads {
                let (lo, hi) = (hd * dh, (hd + 1) * dh);
                let qh = tape.slice_cols(q, lo, hi)?;
                let kh = tape.slice_cols(k, lo, hi)?;
                let vh = tape.slice_cols(v, lo, hi)?;
                let scores = tape.matmul_nt(qh, kh)?;
                let scores = tape.scale(scores, scale);
                let attn = tape.masked_row_softmax(scores, mask)?;
                heads.push(tape.matmul(attn, vh)?);
            }
            let merged = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
            let wo = tape.param(store, b.wo);
            let o = tape.matmul(merged, wo)?;
            x = tape.add(x, o)?;

            let g = tape.param(store, b.ln2.0);
            let beta = tape.param(store, b.ln2.1);
            let a = tape.layer_norm(x, g, beta)?;
            let w1 = tape.param(store, b.w1);
            let b1 = tape.param(store, b.b1);
            let w2 = tape.param(store, b.w2);
            let b2 = tape.param(store, b.b2);
            let f = tape.matmul(a, w1)?;
            let f = tape.add_bias(f, b1)?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, w2)?;
            let f = tape.add_bias(f, b2)?;
            x = tape.add(x, f)?;
        }
        let g = tape.param(store, self.ln_f.0);
        let beta = tape.param(store, self.ln_f.1);
        tape.layer_norm(x, g, beta)
    }

    /// Logits for `hidden ‖ injected`, both `len × h`.
    pub fn head(&self, store: &ParamStore, tape: &mut Tape, hidden: Var, injected: Var) -> Result<Var> {
        let joined = tape.concat_cols(&[hidden, injected])?;
        let w = tape.param(store, self.head_w);
        let b = tape.param(store, self.head_b);
        let logits = tape.matmul(joined, w)?;
        tape.add_bias(logits, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64, vocab: usize, hidden: usize) -> (LanguageModel, ParamStore) {
        let cfg = LmConfig {
            hidden,
            context: 16,
            seed,
            ..Default::default()
        };
        let mut store = ParamStore::new();
        let lm = LanguageModel::init(&cfg, vocab, &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (lm, store)
    }

    #[test]
    fn init_shapes_and_determinism() {
        let (lm, store) = model(1, 100, 64);
        assert_eq!(store.get(lm.token_embedding()).shape(), (100, 64));
        assert_eq!(store.get(lm.head_weight()).shape(), (128, 100));
        let (_, again) = model(1, 100, 64);
        assert_eq!(store.entries(), again.entries());
        let (_, other) = model(2, 100, 64);
        assert_ne!(store.get(lm.token_embedding()), other.get(lm.token_embedding()));
    }

    #[test]
    fn forward_is_causal() {
        let (lm, store) = model(3, 20, 8);
        let run = |tokens: &[usize]| {
            let mut tape = Tape::new();
            let h = lm.causal_forward(&store, &mut tape, tokens).unwrap();
            tape.value(h).clone()
        };
        let a = run(&[1, 5, 7, 9, 11, 2]);
        let b = run(&[1, 5, 7, 3, 11, 2]);
        assert_eq!(a.slice_rows(0, 3).unwrap(), b.slice_rows(0, 3).unwrap());
        assert_ne!(a.row(3), b.row(3));
        assert!(a.is_finite());
        assert_eq!(run(&[4]).shape(), (1, 8));
    }

    #[test]
    fn overlength_and_bad_tokens_are_rejected() {
        let (lm, store) = model(4, 20, 8);
        let mut tape = Tape::new();
        assert!(lm.causal_forward(&store, &mut tape, &[1; 17]).is_err());
        assert!(lm.causal_forward(&store, &mut tape, &[25]).is_err());
    }

    #[test]
    fn attach_rejects_wrong_shapes() {
        let (_, store) = model(5, 20, 8);
        let cfg = LmConfig {
            hidden: 8,
            context: 16,
            ..Default::default()
        };
        assert!(LanguageModel::attach(&cfg, 20, &store).is_ok());
        assert!(matches!(LanguageModel::attach(&cfg, 21, &store), Err(Error::Checkpoint(_))));
    }
}
