use std::collections::HashMap;

use gatdst::data::{build_vocab, generate_synthetic_corpus, BeliefState, SynthConfig, NONE_VALUE};
use gatdst::eval::{
    jaccard_scores, joint_accuracy, load_predictions, read_metrics_report, save_predictions, slot_accuracy,
    write_metrics_report, MetricsReport,
};
use gatdst::model::{Tracker, TrackerConfig};
use gatdst::selftest::{letter_ontology, random_predictions, toy_fixture};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Agreement rate of each designated pair at the last turn, next to the rate
/// expected if the two slots were drawn independently from their marginals.
fn pair_agreement(rho: f64) -> Vec<(f64, f64)> {
    let cfg = SynthConfig {
        dialogues: 1500,
        rho,
        seed: 21,
        ..Default::default()
    };
    let corpus = generate_synthetic_corpus(&cfg).unwrap();
    let o = &corpus.ontology;
    cfg.pairs
        .iter()
        .map(|(a, b)| {
            let (ia, ib) = (o.slot_index(a).unwrap(), o.slot_index(b).unwrap());
            let finals: Vec<&BeliefState> = corpus.dialogues.iter().map(|d| d.state_at(d.len())).collect();
            let both: Vec<(&str, &str)> = finals
                .iter()
                .filter(|s| s.is_filled(ia) && s.is_filled(ib))
                .map(|s| (s.get(ia), s.get(ib)))
                .collect();
            let n = both.len() as f64;
            assert!(n > 100.0, "{a}/{b}: only {n} sessions fill both slots");
            let observed = both.iter().filter(|(x, y)| x == y).count() as f64 / n;
            let mut ma: HashMap<&str, f64> = HashMap::new();
            let mut mb: HashMap<&str, f64> = HashMap::new();
            for (x, y) in &both {
                *ma.entry(x).or_default() += 1.0 / n;
                *mb.entry(y).or_default() += 1.0 / n;
            }
            let expected = ma.iter().map(|(v, p)| p * mb.get(v).copied().unwrap_or(0.0)).sum();
            (observed, expected)
        })
        .collect()
}

#[test]
fn rho_zero_pairs_agree_at_chance() {
    for (observed, expected) in pair_agreement(0.0) {
        assert!((observed - expected).abs() < 0.05, "observed {observed:.3}, chance {expected:.3}");
    }
}

#[test]
fn high_rho_pairs_agree_well_above_chance() {
    for (observed, expected) in pair_agreement(0.9) {
        assert!(observed > expected + 0.4, "observed {observed:.3}, chance {expected:.3}");
    }
}

#[test]
fn synthetic_values_never_tokenize_to_unk() {
    let corpus = generate_synthetic_corpus(&SynthConfig {
        dialogues: 40,
        ..Default::default()
    })
    .unwrap();
    let tok = build_vocab(&corpus.dialogues, &corpus.ontology);
    for v in corpus.ontology.values().iter().map(String::as_str).chain([NONE_VALUE]) {
        assert!(tok.encode(v).iter().all(|&id| tok.token(id) != "<UNK>"), "{v}");
    }
}

#[test]
fn metrics_report_and_predictions_survive_disk() {
    let dir = tempfile::tempdir().unwrap();
    let o = letter_ontology(4);
    let preds = random_predictions(&mut ChaCha8Rng::seed_from_u64(5), 4, 60);
    let report = MetricsReport::compute(&preds, &o, 5).unwrap();
    write_metrics_report(dir.path().join("report"), &report).unwrap();
    assert_eq!(read_metrics_report(dir.path().join("report")).unwrap(), report);

    let path = dir.path().join("preds.jsonl");
    save_predictions(&path, &preds, &o).unwrap();
    assert_eq!(load_predictions(&path, &o).unwrap(), preds);
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let (o, d) = toy_fixture();
    let tok = build_vocab(std::slice::from_ref(&d), &o);
    let tracker = Tracker::new(TrackerConfig::default(), o, tok).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    tracker.save(&path).unwrap();
    let back = Tracker::load(&path).unwrap();
    for t in 1..=d.len() {
        assert_eq!(back.predict_state(&d, t), tracker.predict_state(&d, t));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn slot_accuracy_bounds_joint(seed in any::<u64>(), slots in 1usize..=6, turns in 1usize..=40) {
        let preds = random_predictions(&mut ChaCha8Rng::seed_from_u64(seed), slots, turns);
        prop_assert!(slot_accuracy(&preds).unwrap() >= joint_accuracy(&preds).unwrap());
    }

    #[test]
    fn jaccard_scores_lie_in_unit_interval(seed in any::<u64>(), slots in 2usize..=4, turns in 1usize..=40) {
        let o = letter_ontology(slots);
        let preds = random_predictions(&mut ChaCha8Rng::seed_from_u64(seed), slots, turns);
        let gold: Vec<BeliefState> = preds.into_iter().map(|p| p.gold).collect();
        for e in jaccard_scores(&gold, &o).unwrap() {
            prop_assert!((0.0..=1.0).contains(&e.score) && e.support > 0);
        }
    }
}
