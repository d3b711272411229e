use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tracker::Tracker;
use crate::data::{last_turn_filter, turn_samples, Dialogue, SampleRef};
use crate::error::{Error, Result};
use crate::numeric::{linear_decay_lr, AdamWConfig, AdamWState, ParameterGroup, Tape};

/// Which turns provide supervision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Every turn of every dialogue.
    Full,
    /// Only the final turn of each dialogue.
    LastTurn,
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Regime::Full),
            "last_turn" | "last-turn" => Ok(Regime::LastTurn),
            _ => Err(Error::Config(format!("unknown regime {s:?} (expected full or last_turn)"))),
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::Full => "full",
            Regime::LastTurn => "last_turn",
        })
    }
}

impl Regime {
    pub fn samples(self, corpus: &[Dialogue]) -> Vec<SampleRef> {
        match self {
            Regime::Full => turn_samples(corpus),
            Regime::LastTurn => last_turn_filter(corpus),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub regime: Regime,
    /// Base epoch count for the full regime.
    pub epochs_full: usize,
    /// Base epoch count for the last-turn regime.
    pub epochs_last_turn: usize,
    /// Multiplies the base epoch count (rounded, at least one epoch).
    pub epoch_scale: f64,
    pub batch_size: usize,
    pub lr_lm: f64,
    pub lr_graph: f64,
    pub adamw: AdamWConfig,
    /// Length of the linear decay; defaults to the number of updates.
    pub schedule_steps: Option<u64>,
    /// Shuffling seed.
    pub seed: u64,
    /// Evenly spaced subset of validation turns used for model selection.
    pub max_validation_samples: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Full,
            epochs_full: 8,
            epochs_last_turn: 36,
            epoch_scale: 1.0,
            batch_size: 8,
            lr_lm: 6.25e-5,
            lr_graph: 8e-5,
            adamw: AdamWConfig::default(),
            schedule_steps: None,
            seed: 0,
            max_validation_samples: None,
        }
    }
}

impl TrainConfig {
    pub fn epochs(&self) -> usize {
        let base = match self.regime {
            Regime::Full => self.epochs_full,
            Regime::LastTurn => self.epochs_last_turn,
        };
        ((base as f64 * self.epoch_scale).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.epoch_scale > 0.0) {
            return Err(Error::Config("epoch_scale must be positive".into()));
        }
        if !(self.lr_lm >= 0.0 && self.lr_graph >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
    pub samples: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config_name: String,
    pub samples_per_epoch: usize,
    pub steps: u64,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept (1-based).
    pub best_epoch: usize,
}

impl TrainReport {
    pub fn final_train_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.train_loss)
    }
}

/// Deterministically splits off `fraction` of the dialogues for validation.
pub fn split_corpus(corpus: &[Dialogue], fraction: f64, seed: u64) -> (Vec<Dialogue>, Vec<Dialogue>) {
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_valid = ((corpus.len() as f64) * fraction.clamp(0.0, 1.0)).round() as usize;
    let (valid, train) = idx.split_at(n_valid.min(corpus.len()));
    let pick = |ids: &[usize]| {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        ids.into_iter().map(|i| corpus[i].clone()).collect()
    };
    (pick(train), pick(valid))
}

/// Mean loss of one batch, after applying one optimizer update. Returns the
/// loss and the number of skipped samples.
pub fn train_step(
    tracker: &mut Tracker,
    corpus: &[Dialogue],
    batch: &[SampleRef],
    optimizer: &mut AdamWState,
    groups: &[ParameterGroup],
    lr_scale: f64,
) -> Result<(Option<f64>, usize)> {
    if batch.is_empty() {
        return Err(Error::Contract("train_step needs a non-empty batch".into()));
    }
    let mut tape = Tape::new();
    let mut losses = Vec::with_capacity(batch.len());
    for s in batch {
        if let Some(l) = tracker.sample_loss(tracker.store(), &mut tape, &corpus[s.dialogue], s.turn)? {
            losses.push(l);
        }
    }
    let skipped = batch.len() - losses.len();
    if losses.is_empty() {
        return Ok((None, skipped));
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    let mean = tape.scale(total, 1.0 / losses.len() as f64);
    let value = tape.value(mean).get(0, 0);
    if !value.is_finite() {
        return Err(Error::Contract(format!("non-finite training loss {value}")));
    }
    let grads = tape.backward(mean)?;
    drop(tape);
    optimizer.step(tracker.store_mut(), groups, &grads, lr_scale)?;
    Ok((Some(value), skipped))
}

/// Mean per-turn loss over (a subset of) every turn of `corpus`.
pub fn validation_loss(tracker: &Tracker, corpus: &[Dialogue], max_samples: Option<usize>) -> Result<Option<f64>> {
    let mut samples = turn_samples(corpus);
    if let Some(cap) = max_samples {
        if cap > 0 && samples.len() > cap {
            let stride = samples.len() as f64 / cap as f64;
            samples = (0..cap).map(|i| samples[(i as f64 * stride) as usize]).collect();
        }
    }
    let mut total = 0.0;
    let mut n = 0;
    for s in samples {
        let mut tape = Tape::new();
        if let Some(l) = tracker.sample_loss(tracker.store(), &mut tape, &corpus[s.dialogue], s.turn)? {
            total += tape.value(l).get(0, 0);
            n += 1;
        }
    }
    Ok((n > 0).then(|| total / n as f64))
}

/// Trains in place and keeps the parameters of the epoch with the lowest
/// validation loss (the last epoch when `valid` is empty).
pub fn train(tracker: &mut Tracker, train: &[Dialogue], valid: &[Dialogue], config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    let samples = config.regime.samples(train);
    if samples.is_empty() {
        return Err(Error::Data("training corpus is empty".into()));
    }
    let epochs = config.epochs();
    let batches_per_epoch = samples.len().div_ceil(config.batch_size) as u64;
    let schedule = config.schedule_steps.unwrap_or(batches_per_epoch * epochs as u64);
    let groups = ParameterGroup::split(tracker.store(), config.lr_lm, config.lr_graph);
    let mut optimizer = AdamWState::new(tracker.store(), config.adamw);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut report = TrainReport {
        config_name: tracker.config_name(),
        samples_per_epoch: samples.len(),
        steps: 0,
        epochs: Vec::with_capacity(epochs),
        best_epoch: 0,
    };
    let mut best: Option<(f64, crate::numeric::ParamStore)> = None;
    let mut order = samples;
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut counted, mut skipped) = (0.0, 0usize, 0usize);
        for batch in order.chunks(config.batch_size) {
            let scale = linear_decay_lr(1.0, report.steps, schedule);
            let (loss, skip) = train_step(tracker, train, batch, &mut optimizer, &groups, scale)?;
            report.steps += 1;
            skipped += skip;
            if let Some(l) = loss {
                let n = batch.len() - skip;
                loss_sum += l * n as f64;
                counted += n;
            }
        }
        let valid_loss = if valid.is_empty() {
            None
        } else {
            validation_loss(tracker, valid, config.max_validation_samples)?
        };
        let log = EpochLog {
            epoch,
            train_loss: if counted > 0 { loss_sum / counted as f64 } else { f64::NAN },
            valid_loss,
            samples: counted,
            skipped,
        };
        log::info!(
            "{} epoch {epoch}/{epochs}: train {:.4} valid {}",
            report.config_name,
            log.train_loss,
            valid_loss.map_or("-".to_string(), |v| format!("{v:.4}"))
        );
        if let Some(v) = valid_loss {
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, tracker.store().clone()));
                report.best_epoch = epoch;
            }
        }
        report.epochs.push(log);
    }
    match best {
        Some((_, store)) => *tracker.store_mut() = store,
        None => report.best_epoch = epochs,
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BeliefState, Turn};

    fn corpus(n: usize, turns: usize) -> Vec<Dialogue> {
        (0..n)
            .map(|i| Dialogue {
                id: format!("d{i}"),
                turns: (0..turns)
                    .map(|_| Turn {
                        user: "u".into(),
                        system: "s".into(),
                        state: BeliefState::empty(1),
                    })
                    .collect(),
            })
            .collect()
    }

    #[test]
    fn regimes_select_samples() {
        let c = corpus(100, 5);
        assert_eq!(Regime::LastTurn.samples(&c).len(), 100);
        assert_eq!(Regime::Full.samples(&c).len(), 500);
    }

    #[test]
    fn epochs_scale_and_split_is_deterministic() {
        let mut cfg = TrainConfig::default();
        assert_eq!(cfg.epochs(), 8);
        cfg.regime = Regime::LastTurn;
        assert_eq!(cfg.epochs(), 36);
        cfg.epoch_scale = 0.25;
        assert_eq!(cfg.epochs(), 9);
        cfg.epoch_scale = 0.001;
        assert_eq!(cfg.epochs(), 1);

        let c = corpus(20, 1);
        let (t1, v1) = split_corpus(&c, 0.2, 7);
        let (t2, v2) = split_corpus(&c, 0.2, 7);
        assert_eq!((t1.len(), v1.len()), (16, 4));
        assert_eq!((t1, v1), (t2, v2));
    }
}
