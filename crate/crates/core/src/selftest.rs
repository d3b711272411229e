//! Built-in verification suites shared by the `selftest` command and the
//! acceptance tests.
//!
//! Each suite compares an implementation under test against an independent
//! reference. [`Fault::AttentionSignFlip`] negates the attention score inside
//! the implementation under test only, so a healthy harness must report the
//! gradient, oracle and attention suites as failing when it is set.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{
    build_vocab, parse_state, serialize_state, BeliefState, Dialogue, Ontology, Turn, NONE_VALUE,
};
use crate::error::Result;
use crate::eval::{joint_accuracy, pair_accuracy, per_slot_accuracy, slot_accuracy, TurnPrediction, ValuePair};
use crate::graph::{
    attention_on_tape, head_aggregate, layer_on_tape, message_passing_oracle, Activation,
    GatConfig, GatHeadParams, GraphTopology, GraphType, HeadVars, NodeKind,
};
use crate::model::{LmConfig, Tracker, TrackerConfig};
use crate::numeric::{
    gradient_check_against, GradCheckReport, Matrix, ParamGroupKind, ParamId, ParamStore, Tape, Var,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// Uses `LeakyReLU(-x_iᵀ Q x_j)` as the attention score.
    AttentionSignFlip,
}

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}] {}: {} ({:.1}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.elapsed.as_secs_f64()
        )
    }
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckOutcome {
        name: name.to_string(),
        passed,
        detail,
        elapsed: start.elapsed(),
    }
}

/// Undirected graph on `n` slot nodes with each edge present with probability `density`.
pub fn random_topology<R: Rng + ?Sized>(n: usize, density: f64, rng: &mut R) -> GraphTopology {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < density {
                edges.push((i, j));
            }
        }
    }
    topology(n, &edges)
}

fn topology(n: usize, edges: &[(usize, usize)]) -> GraphTopology {
    GraphTopology::new(vec![NodeKind::Slot; n], (0..n).map(|i| format!("n{i}")).collect(), edges)
        .expect("generated edges are valid")
}

/// Every simple undirected graph on `n` labelled nodes.
pub fn all_topologies(n: usize) -> Vec<GraphTopology> {
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    (0..1u64 << pairs.len())
        .map(|mask| {
            let edges: Vec<_> = pairs
                .iter()
                .enumerate()
                .filter(|(b, _)| mask >> b & 1 == 1)
                .map(|(_, &e)| e)
                .collect();
            topology(n, &edges)
        })
        .collect()
}

/// Attention computed entry by entry from its definition.
pub fn attention_oracle(x: &Matrix, s: &Matrix, q: &Matrix, slope: f64) -> Matrix {
    let n = x.rows();
    let f = x.cols();
    let mut e = Matrix::zeros(n, n);
    for i in 0..n {
        let nbrs: Vec<usize> = (0..n).filter(|&j| s.get(i, j) != 0.0).collect();
        if nbrs.is_empty() {
            continue;
        }
        let scores: Vec<f64> = nbrs
            .iter()
            .map(|&j| {
                let mut z = 0.0;
                for a in 0..f {
                    for b in 0..f {
                        z += x.get(i, a) * q.get(a, b) * x.get(j, b);
                    }
                }
                if z > 0.0 {
                    z
                } else {
                    slope * z
                }
            })
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = scores.iter().map(|z| (z - m).exp()).sum();
        for (&j, z) in nbrs.iter().zip(&scores) {
            e.set(i, j, (z - m).exp() / total);
        }
    }
    e
}

/// Attention of the implementation under test.
fn candidate_attention(x: &Matrix, s: &Matrix, q: &Matrix, slope: f64, fault: Fault) -> Result<Matrix> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let sv = tape.constant(s.clone());
    let qv = tape.constant(q.clone());
    let qv = faulted(&mut tape, qv, fault);
    let e = attention_on_tape(&mut tape, xv, sv, qv, slope)?;
    Ok(tape.value(e).clone())
}

fn faulted(tape: &mut Tape, q: Var, fault: Fault) -> Var {
    match fault {
        Fault::None => q,
        Fault::AttentionSignFlip => tape.scale(q, -1.0),
    }
}

struct RandomStack {
    store: ParamStore,
    layers: Vec<Vec<(ParamId, Vec<ParamId>)>>,
    x: Matrix,
    target: Matrix,
    topology: GraphTopology,
}

impl RandomStack {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let n = rng.random_range(2..=6);
        let k = rng.random_range(1..=3);
        let p = rng.random_range(1..=2);
        let l = rng.random_range(1..=2);
        let f = rng.random_range(2..=3);
        let topology = random_topology(n, 0.6, rng);
        let mut store = ParamStore::new();
        let layers = (0..l)
            .map(|li| {
                (0..p)
                    .map(|pi| {
                        let q = store.add(
                            format!("l{li}.h{pi}.q"),
                            Matrix::random_normal(f, f, 0.6, rng),
                            ParamGroupKind::Graph,
                        );
                        let hops = (0..k)
                            .map(|ki| {
                                store.add(
                                    format!("l{li}.h{pi}.a{ki}"),
                                    Matrix::random_normal(f, f, 0.6, rng),
                                    ParamGroupKind::Graph,
                                )
                            })
                            .collect();
                        (q, hops)
                    })
                    .collect()
            })
            .collect();
        Self {
            store,
            layers,
            x: Matrix::random_normal(n, f, 1.0, rng),
            target: Matrix::random_normal(n, f, 1.0, rng),
            topology,
        }
    }

    /// `Σ (stack(X) ⊙ R)` with tanh activations, so every parameter matters
    /// smoothly almost everywhere.
    fn loss(&self, store: &ParamStore, tape: &mut Tape, fault: Fault) -> Result<Var> {
        let mut h = tape.constant(self.x.clone());
        let s = tape.constant(self.topology.adjacency().clone());
        for heads in &self.layers {
            let vars: Vec<HeadVars> = heads
                .iter()
                .map(|(q, hops)| {
                    let qv = tape.param(store, *q);
                    let qv = faulted(tape, qv, fault);
                    (qv, hops.iter().map(|&a| tape.param(store, a)).collect())
                })
                .collect();
            h = layer_on_tape(tape, h, s, &vars, Activation::Tanh, 0.2)?;
        }
        let r = tape.constant(self.target.clone());
        let prod = tape.mul(h, r)?;
        Ok(tape.sum(prod))
    }
}

/// Finite-difference check of every GAT parameter on `graphs` random stacks.
pub fn gat_gradient_suite(graphs: usize, seed: u64, tol: f64, fault: Fault) -> CheckOutcome {
    timed("gat-gradients", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut worst, mut checked, mut failing) = (0.0f64, 0usize, 0usize);
        for _ in 0..graphs {
            let st = RandomStack::new(&mut rng);
            let ids = st.store.ids().collect::<Vec<_>>();
            let report = gradient_check_against(
                &st.store,
                &ids,
                |s, t| st.loss(s, t, fault),
                |s, t| st.loss(s, t, Fault::None),
                1e-5,
                tol,
            )?;
            worst = worst.max(report.max_rel_error);
            checked += report.checked;
            failing += usize::from(!report.passed());
        }
        Ok((
            failing == 0,
            format!("{graphs} graphs, {checked} entries, max relative error {worst:.2e} (tol {tol:.0e})"),
        ))
    })
}

/// A tiny three-slot ontology and two-turn dialogue with short utterances.
pub fn toy_fixture() -> (Ontology, Dialogue) {
    let ontology = Ontology::from_json(
        r#"{"domains":["hotel","taxi"],
            "slots":[{"domain":"hotel","slot":"name","candidates":["demo hotel","grand inn"]},
                     {"domain":"hotel","slot":"area","candidates":["north","south"]},
                     {"domain":"taxi","slot":"departure","candidates":["18 : 00","grand inn"]}],
            "values":["demo hotel","grand inn","north","south","18 : 00"]}"#,
        "toy",
    )
    .expect("toy ontology is valid");
    let state = |v: [&str; 3]| BeliefState::from_values(v.iter().map(|s| s.to_string()).collect());
    let dialogue = Dialogue {
        id: "toy".into(),
        turns: vec![
            Turn {
                user: "demo hotel".into(),
                system: "area ?".into(),
                state: state(["demo hotel", "none", "none"]),
            },
            Turn {
                user: "north".into(),
                system: "ok".into(),
                state: state(["demo hotel", "north", "none"]),
            },
        ],
    };
    (ontology, dialogue)
}

/// Finite-difference check of the full tracker loss (h = 8, one graph layer)
/// with respect to the graph parameters and the decode head.
pub fn end_to_end_gradient_check(graph_type: GraphType, tol: f64) -> Result<GradCheckReport> {
    let (ontology, dialogue) = toy_fixture();
    let tok = build_vocab(std::slice::from_ref(&dialogue), &ontology);
    let cfg = TrackerConfig {
        lm: LmConfig {
            hidden: 8,
            layers: 1,
            heads: 2,
            context: 64,
            seed: 5,
            ..Default::default()
        },
        gat: GatConfig {
            graph_type,
            layers: 1,
            heads: 1,
            hops: 2,
            activation: Activation::Tanh,
            ..Default::default()
        },
        max_value_tokens: 4,
    };
    let tracker = Tracker::new(cfg, ontology, tok)?;
    let mut params = tracker.graph_stack().param_ids();
    params.push(tracker.language_model().head_weight());
    let objective = |s: &ParamStore, t: &mut Tape| -> Result<Var> {
        tracker
            .sample_loss(s, t, &dialogue, 2)?
            .ok_or_else(|| crate::Error::Contract("toy sample does not fit the context".into()))
    };
    gradient_check_against(tracker.store(), &params, objective, objective, 1e-5, tol)
}

pub fn end_to_end_gradient_suite(tol: f64) -> CheckOutcome {
    timed("end-to-end-gradients", || {
        let mut worst = 0.0f64;
        let mut ok = true;
        for g in [GraphType::DsGraph, GraphType::DsvGraph] {
            let r = end_to_end_gradient_check(g, tol)?;
            worst = worst.max(r.max_rel_error);
            ok &= r.passed();
        }
        Ok((ok, format!("tracker loss, max relative error {worst:.2e} (tol {tol:.0e})")))
    })
}

/// Matrix-form aggregation against the per-node message-passing oracle, with
/// both sides using their own attention computation.
pub fn oracle_suite(instances: usize, seed: u64, tol: f64, fault: Fault) -> CheckOutcome {
    timed("aggregation-oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let n = rng.random_range(1..=6);
            let k = rng.random_range(1..=3);
            let f = rng.random_range(1..=4);
            let g = random_topology(n, rng.random_range(0.2..0.9), &mut rng);
            let s = g.adjacency();
            let x = Matrix::random_normal(n, f, 1.0, &mut rng);
            let head = GatHeadParams {
                hops: (0..k).map(|_| Matrix::random_normal(f, f, 0.7, &mut rng)).collect(),
                q: Matrix::random_normal(f, f, 0.7, &mut rng),
            };
            let e_impl = candidate_attention(&x, s, &head.q, 0.2, fault)?;
            let got = head_aggregate(&x, s, &e_impl, &head)?;
            let e_ref = attention_oracle(&x, s, &head.q, 0.2);
            let mut want = Matrix::zeros(n, f);
            for (hop, a) in head.hops.iter().enumerate() {
                want.add_assign(&message_passing_oracle(&x, s, &e_ref, hop)?.matmul(a)?);
            }
            worst = worst.max(got.max_abs_diff(&want));
        }
        Ok((
            worst < tol,
            format!("{instances} instances, max abs difference {worst:.2e} (tol {tol:.0e})"),
        ))
    })
}

/// Exhaustive attention checks on every graph with up to `max_nodes` nodes.
pub fn attention_suite(max_nodes: usize, seed: u64, fault: Fault) -> CheckOutcome {
    timed("attention-properties", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut graphs, mut problems) = (0usize, Vec::new());
        for n in 1..=max_nodes {
            for g in all_topologies(n) {
                graphs += 1;
                let s = g.adjacency();
                let f = 3;
                let x = Matrix::random_normal(n, f, 1.0, &mut rng);
                let q = Matrix::random_normal(f, f, 0.8, &mut rng);
                let e = candidate_attention(&x, s, &q, 0.2, fault)?;
                let uniform = candidate_attention(&x, s, &Matrix::zeros(f, f), 0.2, fault)?;
                if e.max_abs_diff(&attention_oracle(&x, s, &q, 0.2)) > 1e-12 {
                    problems.push(format!("{n}-node graph {:?}: differs from definition", g.edges()));
                }
                for i in 0..n {
                    let deg = g.neighbors(i).count();
                    let sum: f64 = e.row(i).iter().sum();
                    if deg > 0 && (sum - 1.0).abs() > 1e-9 {
                        problems.push(format!("row {i} sums to {sum}"));
                    }
                    for j in 0..n {
                        let edge = g.has_edge(i, j);
                        if !edge && e.get(i, j) != 0.0 {
                            problems.push(format!("non-edge ({i},{j}) has weight {}", e.get(i, j)));
                        }
                        if edge && (uniform.get(i, j) - 1.0 / deg as f64).abs() > 1e-12 {
                            problems.push(format!("Q = 0 weight ({i},{j}) is not 1/{deg}"));
                        }
                    }
                }
            }
        }
        let passed = problems.is_empty();
        let mut detail = format!("{graphs} graphs with up to {max_nodes} nodes");
        if let Some(p) = problems.first() {
            detail.push_str(&format!(", {} problems, first: {p}", problems.len()));
        }
        Ok((passed, detail))
    })
}

fn random_state<R: Rng + ?Sized>(ontology: &Ontology, rng: &mut R) -> BeliefState {
    let values = (0..ontology.slot_count())
        .map(|i| {
            let cands: Vec<&str> = ontology.candidate_values(i).collect();
            if cands.is_empty() || rng.random::<f64>() < 0.4 {
                NONE_VALUE.to_string()
            } else {
                cands[rng.random_range(0..cands.len())].to_string()
            }
        })
        .collect();
    BeliefState::from_values(values)
}

/// Serialize / parse round trip on random states of the toy ontology.
pub fn round_trip_suite(states: usize, seed: u64) -> CheckOutcome {
    timed("state-round-trip", || {
        let (ontology, dialogue) = toy_fixture();
        let tok = build_vocab(std::slice::from_ref(&dialogue), &ontology);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bad = 0;
        for _ in 0..states {
            let s = random_state(&ontology, &mut rng);
            let parsed = parse_state(&serialize_state(&s, &ontology, &tok), &ontology, &tok);
            bad += usize::from(parsed.state != s || !parsed.warnings.is_empty());
        }
        Ok((bad == 0, format!("{states} states, {bad} mismatches")))
    })
}

/// A random batch of predictions over `slots` slots with values from a small pool.
pub fn random_predictions<R: Rng + ?Sized>(rng: &mut R, slots: usize, turns: usize) -> Vec<TurnPrediction> {
    const POOL: [&str; 4] = [NONE_VALUE, "a", "b", "c"];
    let draw = |rng: &mut R| BeliefState::from_values((0..slots).map(|_| POOL[rng.random_range(0..4)].to_string()).collect());
    let mut out = Vec::with_capacity(turns);
    let mut d = 0;
    while out.len() < turns {
        let len = rng.random_range(1..=4).min(turns - out.len());
        for t in 1..=len {
            let gold = draw(rng);
            let predicted = if rng.random::<f64>() < 0.3 {
                gold.clone()
            } else {
                let mut p = gold.clone();
                for i in 0..slots {
                    if rng.random::<f64>() < 0.3 {
                        p.set(i, POOL[rng.random_range(0..4)]);
                    }
                }
                p
            };
            out.push(TurnPrediction {
                dialogue_id: format!("r{d}"),
                turn: t,
                total_turns: len,
                predicted,
                gold,
            });
        }
        d += 1;
    }
    out
}

/// Ontology with `slots` slots `d-s{i}` over the values `a`, `b`, `c`.
pub fn letter_ontology(slots: usize) -> Ontology {
    let slot_json: Vec<String> = (0..slots)
        .map(|i| format!(r#"{{"domain":"d","slot":"s{i}","candidates":["a","b","c"]}}"#))
        .collect();
    Ontology::from_json(
        &format!(r#"{{"domains":["d"],"values":["a","b","c"],"slots":[{}]}}"#, slot_json.join(",")),
        "letters",
    )
    .expect("letter ontology is valid")
}

/// Metrics against brute-force counting over random prediction sets.
pub fn metrics_oracle_suite(sets: usize, seed: u64) -> CheckOutcome {
    timed("metrics-oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut problems = Vec::new();
        for set in 0..sets {
            let slots = rng.random_range(1..=5);
            let turns = rng.random_range(1..=30);
            let ontology = letter_ontology(slots);
            let preds = random_predictions(&mut rng, slots, turns);

            let rendered = |s: &BeliefState| s.values().join("|");
            let joint_hits = preds.iter().filter(|p| rendered(&p.predicted) == rendered(&p.gold)).count();
            let mut slot_hits = vec![0usize; slots];
            for p in &preds {
                for (i, (a, b)) in p.predicted.values().iter().zip(p.gold.values()).enumerate() {
                    if a == b {
                        slot_hits[i] += 1;
                    }
                }
            }
            let joint = joint_accuracy(&preds)?;
            let slot = slot_accuracy(&preds)?;
            let per = per_slot_accuracy(&preds, &ontology)?;
            let want_joint = joint_hits as f64 / turns as f64;
            let want_slot = slot_hits.iter().sum::<usize>() as f64 / (slots * turns) as f64;
            if (joint - want_joint).abs() > 1e-12 || (slot - want_slot).abs() > 1e-12 {
                problems.push(format!("set {set}: joint/slot mismatch"));
            }
            if slot < joint {
                problems.push(format!("set {set}: slot accuracy below joint"));
            }
            for (i, &h) in slot_hits.iter().enumerate() {
                if (per[i] - h as f64 / turns as f64).abs() > 1e-12 {
                    problems.push(format!("set {set}: per-slot {i} mismatch"));
                }
            }
            if slots >= 2 {
                for v1 in ["a", "b"] {
                    for v2 in ["a", "c"] {
                        let pair = ValuePair {
                            slot1: "d-s0".into(),
                            value1: v1.into(),
                            slot2: "d-s1".into(),
                            value2: v2.into(),
                        };
                        let (mut n, mut k) = (0, 0);
                        for p in &preds {
                            let g = p.gold.values();
                            if g[0] == v1 && g[1] == v2 {
                                n += 1;
                                let q = p.predicted.values();
                                if q[0] == v1 && q[1] == v2 {
                                    k += 1;
                                }
                            }
                        }
                        let want = (n > 0).then(|| k as f64 / n as f64);
                        if pair_accuracy(&preds, &ontology, &pair)? != want {
                            problems.push(format!("set {set}: pair {v1}/{v2} mismatch"));
                        }
                    }
                }
            }
        }
        let detail = match problems.first() {
            None => format!("{sets} random prediction sets"),
            Some(p) => format!("{} problems, first: {p}", problems.len()),
        };
        Ok((problems.is_empty(), detail))
    })
}

/// The suites run by the `selftest` command.
pub fn run_all(fault: Fault) -> Vec<CheckOutcome> {
    vec![
        gat_gradient_suite(20, 11, 1e-4, fault),
        end_to_end_gradient_suite(1e-3),
        oracle_suite(100, 12, 1e-10, fault),
        attention_suite(4, 13, fault),
        round_trip_suite(1000, 14),
        metrics_oracle_suite(500, 15),
    ]
}
