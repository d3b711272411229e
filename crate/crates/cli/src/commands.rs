use std::path::Path;

use gatdst::data::{
    build_vocab, generate_synthetic_corpus, load_corpus, save_corpus, Dialogue, Ontology, SupervisionStats,
};
use gatdst::eval::{
    band_mean_delta, jaccard_scores, load_predictions, pair_deltas, predict_corpus, save_predictions,
    windowed_pair_delta, write_csv, write_jaccard, write_metrics_report, write_pair_deltas, write_windowed,
    GoldPredictor, MetricsReport, StatePredictor, JACCARD_FILE, PAIR_DELTA_FILE, WINDOW_FILE,
};
use gatdst::model::{split_corpus, train as train_tracker, Tracker};
use gatdst::selftest::{run_all, Fault};

use crate::config::{resolve, RunConfig};
use crate::CliError;

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))
}

fn print_supervision(label: &str, corpus: &[Dialogue]) {
    let s = SupervisionStats::of(corpus);
    println!(
        "{label}: {} dialogues, {} turns, {} last-turn samples, ratio {:.4}",
        s.dialogues,
        s.turns,
        s.last_turn_samples,
        s.ratio()
    );
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    create_dir(out)?;
    let corpus = generate_synthetic_corpus(&cfg.synth)?;
    let p = &cfg.paths;
    corpus.ontology.save(resolve(out, &p.ontology))?;
    save_corpus(resolve(out, &p.corpus), &corpus.dialogues, &corpus.ontology)?;

    let (rest, test) = split_corpus(&corpus.dialogues, cfg.split.test_fraction, cfg.synth.seed);
    let valid_share = cfg.split.valid_fraction / (1.0 - cfg.split.test_fraction);
    let (train, valid) = split_corpus(&rest, valid_share, cfg.synth.seed.wrapping_add(1));
    save_corpus(resolve(out, &p.train), &train, &corpus.ontology)?;
    save_corpus(resolve(out, &p.valid), &valid, &corpus.ontology)?;
    save_corpus(resolve(out, &p.test), &test, &corpus.ontology)?;

    println!(
        "ontology: {} domain-slots, {} values",
        corpus.ontology.slot_count(),
        corpus.ontology.value_count()
    );
    print_supervision("corpus", &corpus.dialogues);
    for (name, part) in [("train", &train), ("valid", &valid), ("test", &test)] {
        print_supervision(name, part);
    }
    Ok(())
}

fn load_split(out: &Path, which: &Path, ontology: &Ontology) -> Result<Vec<Dialogue>, CliError> {
    Ok(load_corpus(resolve(out, which), ontology)?)
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let ontology = Ontology::load(resolve(out, &cfg.paths.ontology))?;
    let train = load_split(out, &cfg.paths.train, &ontology)?;
    let valid = load_split(out, &cfg.paths.valid, &ontology)?;
    let tokenizer = build_vocab(&train, &ontology);
    let mut tracker = Tracker::new(cfg.tracker_config(), ontology, tokenizer)?;
    println!(
        "{}: {} training dialogues, {} regime, {} epochs, {} graph parameters",
        tracker.config_name(),
        train.len(),
        cfg.train.regime,
        cfg.train.epochs(),
        tracker.graph_stack().param_ids().len()
    );
    let report = train_tracker(&mut tracker, &train, &valid, &cfg.train)?;
    write_csv(resolve(out, &cfg.paths.train_log), &report.epochs)?;
    tracker.save(resolve(out, &cfg.paths.checkpoint))?;
    println!(
        "samples per epoch {}, updates {}, best epoch {}, final train loss {:.6}",
        report.samples_per_epoch,
        report.steps,
        report.best_epoch,
        report.final_train_loss()
    );
    Ok(())
}

pub fn eval(cfg: &RunConfig, out: &Path, gold: bool) -> Result<(), CliError> {
    let ontology = Ontology::load(resolve(out, &cfg.paths.ontology))?;
    let test = load_split(out, &cfg.paths.test, &ontology)?;
    let (name, predictions) = if gold {
        ("gold".to_string(), predict_corpus(&GoldPredictor, &test))
    } else {
        let tracker = Tracker::load(resolve(out, &cfg.paths.checkpoint))?;
        if tracker.ontology().slot_keys() != ontology.slot_keys() {
            return Err(CliError::Input(
                "checkpoint slot order differs from the configured ontology".into(),
            ));
        }
        let predictor: &dyn StatePredictor = &tracker;
        (tracker.config_name(), predict_corpus(predictor, &test))
    };
    let report = MetricsReport::compute(&predictions, &ontology, cfg.analysis.progress_buckets)?;
    write_metrics_report(resolve(out, &cfg.paths.report_dir), &report)?;
    save_predictions(resolve(out, &cfg.paths.predictions), &predictions, &ontology)?;
    println!(
        "{name}: {} turns of {} dialogues, joint accuracy {:.4}, slot accuracy {:.4}",
        report.turns, report.dialogues, report.joint_accuracy, report.slot_accuracy
    );
    for s in &report.per_slot {
        println!("  {:<32} {:.4}", s.slot, s.accuracy);
    }
    Ok(())
}

pub fn analyze(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let ontology = Ontology::load(resolve(out, &cfg.paths.ontology))?;
    let test = load_split(out, &cfg.paths.test, &ontology)?;
    let gold_states: Vec<_> = test.iter().flat_map(|d| d.turns.iter().map(|t| t.state.clone())).collect();
    let entries = jaccard_scores(&gold_states, &ontology)?;
    let model = load_predictions(resolve(out, &cfg.paths.predictions), &ontology)?;
    let baseline = load_predictions(resolve(out, &cfg.paths.baseline_predictions), &ontology)?;
    let deltas = pair_deltas(&entries, &model, &baseline, &ontology)?;

    let dir = resolve(out, &cfg.paths.report_dir);
    create_dir(&dir)?;
    write_jaccard(dir.join(JACCARD_FILE), &entries)?;
    write_pair_deltas(dir.join(PAIR_DELTA_FILE), &deltas)?;
    println!("{} value pairs scored, {} with gold support in the dumps", entries.len(), deltas.len());
    if deltas.is_empty() {
        println!("no value pair has gold support; skipping the windowed curve");
        return Ok(());
    }
    let curve = windowed_pair_delta(&deltas, cfg.analysis.window, None)?;
    write_windowed(dir.join(WINDOW_FILE), &curve)?;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:+.4}"));
    println!(
        "mean pair-accuracy delta: J <= 0.2 {}, J >= 0.8 {}",
        fmt(band_mean_delta(&deltas, 0.0, 0.2)),
        fmt(band_mean_delta(&deltas, 0.8, 1.0))
    );
    Ok(())
}

pub fn selftest(inject_sign_flip: bool) -> Result<(), CliError> {
    let fault = if inject_sign_flip {
        Fault::AttentionSignFlip
    } else {
        Fault::None
    };
    let outcomes = run_all(fault);
    for o in &outcomes {
        println!("{o}");
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    if failed == 0 {
        println!("all {} suites passed", outcomes.len());
        Ok(())
    } else {
        Err(CliError::Internal(format!("{failed} of {} suites failed", outcomes.len())))
    }
}
