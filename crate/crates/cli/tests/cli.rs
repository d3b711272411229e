use std::path::Path;
use std::process::{Command, Output};

use gatdst::data::{load_corpus, Ontology};
use gatdst::eval::{read_metrics_report, read_pair_deltas, JACCARD_FILE, PAIR_DELTA_FILE};

fn gatdst(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gatdst"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        stdout(&o),
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

/// A configuration small enough to train in a few seconds.
const TINY: &[&str] = &[
    "--set",
    "synth.dialogues=12",
    "--set",
    "model.hidden=8",
    "--set",
    "model.layers=1",
    "--set",
    "model.heads=1",
    "--set",
    "train.epochs_full=2",
    "--set",
    "train.epochs_last_turn=2",
    "--set",
    "train.lr_lm=0.003",
    "--set",
    "graph.layers=1",
    "--set",
    "graph.heads=1",
];

fn with_tiny<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut v: Vec<&str> = extra.to_vec();
    v.extend_from_slice(TINY);
    v
}

#[test]
fn synth_writes_splits_and_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let out = ok(gatdst(a.path(), &["synth", "--seed", "4", "--set", "synth.dialogues=100"]));
    assert!(out.contains("corpus: 100 dialogues"), "{out}");
    assert!(out.contains("ratio 0."), "{out}");
    ok(gatdst(b.path(), &["synth", "--seed", "4", "--set", "synth.dialogues=100"]));
    for f in ["ontology.json", "corpus.jsonl", "train.jsonl", "valid.jsonl", "test.jsonl"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert_eq!(x, y, "{f} differs between identical runs");
    }
    let o = Ontology::load(a.path().join("ontology.json")).unwrap();
    let parts: usize = ["train.jsonl", "valid.jsonl", "test.jsonl"]
        .iter()
        .map(|f| load_corpus(a.path().join(f), &o).unwrap().len())
        .sum();
    assert_eq!(parts, 100);
}

#[test]
fn config_errors_exit_with_one() {
    let d = tempfile::tempdir().unwrap();
    let o = gatdst(d.path(), &["synth", "--set", "synth.rho=1.5"]);
    assert_eq!(o.status.code(), Some(1));
    let o = gatdst(d.path(), &["synth", "--set", "no.such.key=1"]);
    assert_eq!(o.status.code(), Some(1));
    let o = gatdst(d.path(), &["train"]);
    assert_eq!(o.status.code(), Some(1), "missing data files");
    std::fs::write(d.path().join("bad.json"), "{ not json").unwrap();
    let cfg = d.path().join("bad.json");
    let o = gatdst(d.path(), &["synth", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn config_file_and_flags_combine() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.json");
    std::fs::write(&cfg, r#"{"graph": {"graph_type": "DSGraph", "layers": 1, "heads": 3, "hops": 2}}"#).unwrap();
    let out = ok(gatdst(
        d.path(),
        &["show-config", "--config", cfg.to_str().unwrap(), "--set", "graph.hops=3", "--seed", "9"],
    ));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["graph"]["graph_type"], "DSGraph");
    assert_eq!(v["graph"]["heads"], 3);
    assert_eq!(v["graph"]["hops"], 3);
    assert_eq!(v["train"]["seed"], 9);

    let out = ok(gatdst(d.path(), &["show-config", "--set", "graph.graph_type=NoGraph"]));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!((v["graph"]["layers"].as_u64(), v["graph"]["heads"].as_u64()), (Some(0), Some(0)));
}

#[test]
fn train_eval_analyze_pipeline() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(gatdst(p, &with_tiny(&["synth", "--seed", "1"])));

    let base = with_tiny(&[
        "train",
        "--seed",
        "1",
        "--set",
        "graph.graph_type=NoGraph",
        "--set",
        "train.regime=last_turn",
    ]);
    let first = ok(gatdst(p, &base));
    assert!(first.contains("L0P0K0-NoGraph"), "{first}");
    assert!(first.contains(", 0 graph parameters"), "{first}");
    let o = Ontology::load(p.join("ontology.json")).unwrap();
    let n_train = load_corpus(p.join("train.jsonl"), &o).unwrap().len();
    assert!(first.contains(&format!("samples per epoch {n_train},")), "{first}");
    let again = ok(gatdst(p, &base));
    assert_eq!(
        first.lines().last(),
        again.lines().last(),
        "same seed must reproduce the final loss exactly"
    );
    assert!(std::fs::read_to_string(p.join("train_log.csv")).unwrap().starts_with("epoch,"));

    let out = ok(gatdst(p, &with_tiny(&["eval", "--set", "paths.predictions=baseline_predictions.jsonl"])));
    let test_turns: usize = load_corpus(p.join("test.jsonl"), &o).unwrap().iter().map(|d| d.len()).sum();
    assert!(out.contains(&format!("{test_turns} turns")), "{out}");
    let report = read_metrics_report(p.join("report")).unwrap();
    assert_eq!(report.turns, test_turns);
    assert_eq!(report.per_slot.len(), o.slot_count());
    assert!(report.slot_accuracy >= report.joint_accuracy);

    ok(gatdst(p, &with_tiny(&["train", "--seed", "1", "--set", "graph.graph_type=DSVGraph"])));
    ok(gatdst(p, &with_tiny(&["eval"])));
    let out = ok(gatdst(p, &with_tiny(&["analyze"])));
    assert!(out.contains("value pairs scored"), "{out}");
    assert!(p.join("report").join(JACCARD_FILE).exists());
    assert!(p.join("report").join(PAIR_DELTA_FILE).exists());
}

#[test]
fn gold_eval_is_perfect_and_self_analysis_has_zero_deltas() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(gatdst(p, &["synth", "--seed", "2", "--set", "synth.dialogues=60"]));
    let out = ok(gatdst(p, &["eval", "--gold"]));
    assert!(out.contains("joint accuracy 1.0000"), "{out}");
    std::fs::copy(p.join("predictions.jsonl"), p.join("baseline_predictions.jsonl")).unwrap();
    ok(gatdst(p, &["analyze"]));
    let deltas = read_pair_deltas(p.join("report").join(PAIR_DELTA_FILE)).unwrap();
    assert!(!deltas.is_empty());
    assert!(deltas.iter().all(|d| d.delta() == 0.0 && d.model == 1.0));
}

#[test]
fn analyze_rejects_mismatched_dumps() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(gatdst(p, &["synth", "--seed", "3", "--set", "synth.dialogues=30"]));
    ok(gatdst(p, &["eval", "--gold"]));
    let text = std::fs::read_to_string(p.join("predictions.jsonl")).unwrap();
    let fewer: Vec<&str> = text.lines().skip(1).collect();
    std::fs::write(p.join("baseline_predictions.jsonl"), fewer.join("\n")).unwrap();
    let o = gatdst(p, &["analyze"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn selftest_passes_and_catches_injected_fault() {
    let d = tempfile::tempdir().unwrap();
    let out = ok(gatdst(d.path(), &["selftest"]));
    assert!(out.contains("all 6 suites passed"), "{out}");
    let o = gatdst(d.path(), &["selftest", "--inject-sign-flip"]);
    assert_eq!(o.status.code(), Some(2));
    let text = stdout(&o);
    for suite in ["gat-gradients", "aggregation-oracle", "attention-properties"] {
        assert!(text.contains(&format!("[FAIL] {suite}")), "{text}");
    }
}
