//! Multi-head K-hop graph attention.
//!
//! For one head with hop transforms `A_0..A_{K-1}` and attention transform `Q`:
//!
//! ```text
//! e_ij = LeakyReLU(x_i^T Q x_j), normalised over the neighbours j of i
//! A(X; S) = sum_k (E ⊙ S)^k X A_k
//! ```
//!
//! A layer applies the activation to each head and averages the heads. Powers
//! of `E ⊙ S` are applied to `X` one multiplication at a time.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::topology::{GraphTopology, GraphType};
use crate::error::{Error, Result};
use crate::numeric::{Matrix, ParamGroupKind, ParamId, ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Identity,
    LeakyRelu { slope: f64 },
    Tanh,
}

impl Default for Activation {
    fn default() -> Self {
        Activation::LeakyRelu { slope: 0.2 }
    }
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::LeakyRelu { slope } => tape.leaky_relu(x, slope),
            Activation::Tanh => Ok(tape.tanh(x)),
        }
    }
}

/// Architecture of the graph stack attached to the tracker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatConfig {
    pub graph_type: GraphType,
    pub layers: usize,
    pub heads: usize,
    pub hops: usize,
    pub activation: Activation,
    /// Negative slope of the LeakyReLU inside the attention scores.
    pub attention_slope: f64,
}

impl Default for GatConfig {
    fn default() -> Self {
        Self {
            graph_type: GraphType::DsvGraph,
            layers: 2,
            heads: 2,
            hops: 2,
            activation: Activation::default(),
            attention_slope: 0.2,
        }
    }
}

impl GatConfig {
    /// The graph-free baseline, `L0P0K0-NoGraph`.
    pub fn no_graph() -> Self {
        Self {
            graph_type: GraphType::NoGraph,
            layers: 0,
            heads: 0,
            hops: 0,
            ..Self::default()
        }
    }

    pub fn name(&self) -> String {
        format!("L{}P{}K{}-{}", self.layers, self.heads, self.hops, self.graph_type)
    }

    pub fn validate(&self) -> Result<()> {
        if self.graph_type == GraphType::NoGraph && (self.layers, self.heads, self.hops) != (0, 0, 0) {
            return Err(Error::Config(format!("NoGraph requires L = P = K = 0, got {}", self.name())));
        }
        if self.graph_type != GraphType::NoGraph && self.layers == 0 {
            return Err(Error::Config(format!("{} needs at least one layer", self.graph_type)));
        }
        if self.layers > 0 && (self.heads == 0 || self.hops == 0) {
            return Err(Error::Config(format!(
                "{}: every layer needs at least one head and one hop",
                self.name()
            )));
        }
        if self.attention_slope < 0.0 {
            return Err(Error::Config("attention_slope must be non-negative".into()));
        }
        Ok(())
    }
}

/// One head's parameters as plain matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct GatHeadParams {
    /// `A_0..A_{K-1}`, each `F × G`.
    pub hops: Vec<Matrix>,
    /// `F × F`.
    pub q: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatLayerParams {
    pub heads: Vec<GatHeadParams>,
    pub activation: Activation,
    pub leaky_slope: f64,
}

impl GatLayerParams {
    /// Checks head agreement and `G == F`; returns `F`.
    pub fn feature_dim(&self) -> Result<usize> {
        let first = self
            .heads
            .first()
            .ok_or_else(|| Error::Contract("a GAT layer needs at least one head".into()))?;
        let f = first.q.rows();
        let k = first.hops.len();
        for (p, h) in self.heads.iter().enumerate() {
            if h.q.shape() != (f, f) {
                return Err(Error::shape("head attention transform", (f, f), h.q.shape()));
            }
            if h.hops.len() != k {
                return Err(Error::Contract(format!("head {p} has {} hops, head 0 has {k}", h.hops.len())));
            }
            if let Some(a) = h.hops.iter().find(|a| a.shape() != (f, f)) {
                return Err(Error::shape("head hop transform", (f, f), a.shape()));
            }
        }
        Ok(f)
    }
}

/// Tape-level attention: `masked_row_softmax(LeakyReLU(X Q Xᵀ), S)`.
pub fn attention_on_tape(tape: &mut Tape, x: Var, s: Var, q: Var, slope: f64) -> Result<Var> {
    let xq = tape.matmul(x, q)?;
    let scores = tape.matmul_nt(xq, x)?;
    let scores = tape.leaky_relu(scores, slope)?;
    tape.masked_row_softmax(scores, s)
}

/// Tape-level `sum_k (E ⊙ S)^k X A_k`.
pub fn head_on_tape(tape: &mut Tape, x: Var, s: Var, e: Var, hops: &[Var]) -> Result<Var> {
    let (a0, rest) = hops
        .split_first()
        .ok_or_else(|| Error::Contract("a head needs at least the self hop (K >= 1)".into()))?;
    let mut out = tape.matmul(x, *a0)?;
    if rest.is_empty() {
        return Ok(out);
    }
    let es = tape.mul(e, s)?;
    let mut propagated = x;
    for a in rest {
        propagated = tape.matmul(es, propagated)?;
        let term = tape.matmul(propagated, *a)?;
        out = tape.add(out, term)?;
    }
    Ok(out)
}

/// Per-head variables of one layer: `(Q, [A_k])`.
pub type HeadVars = (Var, Vec<Var>);

/// Tape-level layer: mean over heads of the activated head outputs.
pub fn layer_on_tape(
    tape: &mut Tape,
    x: Var,
    s: Var,
    heads: &[HeadVars],
    activation: Activation,
    slope: f64,
) -> Result<Var> {
    if heads.is_empty() {
        return Err(Error::Contract("a GAT layer needs at least one head".into()));
    }
    let mut total: Option<Var> = None;
    for (q, hops) in heads {
        let e = attention_on_tape(tape, x, s, *q, slope)?;
        let h = head_on_tape(tape, x, s, e, hops)?;
        let h = activation.apply(tape, h)?;
        total = Some(match total {
            None => h,
            Some(t) => tape.add(t, h)?,
        });
    }
    Ok(tape.scale(total.expect("at least one head"), 1.0 / heads.len() as f64))
}

fn check_square(x: &Matrix, s: &Matrix) -> Result<()> {
    if s.rows() != s.cols() || s.rows() != x.rows() {
        return Err(Error::shape("graph features vs adjacency", x.shape(), s.shape()));
    }
    Ok(())
}

fn head_vars(tape: &mut Tape, head: &GatHeadParams) -> HeadVars {
    let q = tape.constant(head.q.clone());
    let hops = head.hops.iter().map(|a| tape.constant(a.clone())).collect();
    (q, hops)
}

/// Per-head attention matrix `E` (`N × N`).
pub fn attention_matrix(x: &Matrix, s: &Matrix, head: &GatHeadParams, leaky_slope: f64) -> Result<Matrix> {
    check_square(x, s)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let sv = tape.constant(s.clone());
    let q = tape.constant(head.q.clone());
    let e = attention_on_tape(&mut tape, xv, sv, q, leaky_slope)?;
    Ok(tape.value(e).clone())
}

/// `sum_k (E ⊙ S)^k X A_k` for a given `E`.
pub fn head_aggregate(x: &Matrix, s: &Matrix, e: &Matrix, head: &GatHeadParams) -> Result<Matrix> {
    check_square(x, s)?;
    if e.shape() != s.shape() {
        return Err(Error::shape("attention vs adjacency", e.shape(), s.shape()));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let sv = tape.constant(s.clone());
    let ev = tape.constant(e.clone());
    let (_, hops) = head_vars(&mut tape, head);
    let out = head_on_tape(&mut tape, xv, sv, ev, &hops)?;
    Ok(tape.value(out).clone())
}

pub fn gat_layer_forward(x: &Matrix, topology: &GraphTopology, layer: &GatLayerParams) -> Result<Matrix> {
    let f = layer.feature_dim()?;
    if x.cols() != f {
        return Err(Error::shape("gat layer input", x.shape(), (topology.node_count(), f)));
    }
    check_square(x, topology.adjacency())?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let sv = tape.constant(topology.adjacency().clone());
    let heads: Vec<HeadVars> = layer.heads.iter().map(|h| head_vars(&mut tape, h)).collect();
    let out = layer_on_tape(&mut tape, xv, sv, &heads, layer.activation, layer.leaky_slope)?;
    Ok(tape.value(out).clone())
}

/// Applies the layers in order; an empty stack returns `x` unchanged.
pub fn gat_stack_forward(x: &Matrix, topology: &GraphTopology, layers: &[GatLayerParams]) -> Result<Matrix> {
    let mut h = x.clone();
    for layer in layers {
        h = gat_layer_forward(&h, topology, layer)?;
    }
    Ok(h)
}

/// The first `N_ds` rows: the slot-node outputs.
pub fn slice_slot_outputs(xl: &Matrix, topology: &GraphTopology) -> Result<Matrix> {
    let n_ds = topology.check_slot_prefix()?;
    if xl.rows() != topology.node_count() {
        return Err(Error::shape("slot slice", xl.shape(), (topology.node_count(), xl.cols())));
    }
    xl.slice_rows(0, n_ds)
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct HeadIds {
    q: ParamId,
    hops: Vec<ParamId>,
}

/// Trainable stack whose parameters live in a [`ParamStore`] (graph group).
#[derive(Clone, Debug, PartialEq)]
pub struct GatStack {
    config: GatConfig,
    feature_dim: usize,
    layers: Vec<Vec<HeadIds>>,
}

impl GatStack {
    /// Registers `layers × heads × (hops + 1)` parameters under `prefix`.
    ///
    /// `A_0` starts near the identity so an untrained stack roughly passes the
    /// slot features through; the other transforms are small Gaussians.
    pub fn init<R: Rng + ?Sized>(
        config: &GatConfig,
        feature_dim: usize,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let f = feature_dim;
        let std = 1.0 / (f as f64).sqrt();
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let mut heads = Vec::with_capacity(config.heads);
            for p in 0..config.heads {
                let q = store.add(
                    format!("{prefix}.layer{l}.head{p}.q"),
                    Matrix::random_normal(f, f, 0.5 * std, rng),
                    ParamGroupKind::Graph,
                );
                let hops = (0..config.hops)
                    .map(|k| {
                        let mut a = Matrix::random_normal(f, f, 0.5 * std, rng);
                        if k == 0 {
                            a.add_assign(&Matrix::identity(f));
                        }
                        store.add(format!("{prefix}.layer{l}.head{p}.a{k}"), a, ParamGroupKind::Graph)
                    })
                    .collect();
                heads.push(HeadIds { q, hops });
            }
            layers.push(heads);
        }
        Ok(Self {
            config: config.clone(),
            feature_dim,
            layers,
        })
    }

    /// Looks the parameters up by name, as written by [`GatStack::init`].
    pub fn attach(config: &GatConfig, feature_dim: usize, store: &ParamStore, prefix: &str) -> Result<Self> {
        config.validate()?;
        let find = |name: String| {
            let id = store
                .lookup(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing graph parameter {name}")))?;
            if store.get(id).shape() != (feature_dim, feature_dim) {
                return Err(Error::Checkpoint(format!(
                    "graph parameter {name} has shape {:?}, expected {:?}",
                    store.get(id).shape(),
                    (feature_dim, feature_dim)
                )));
            }
            Ok(id)
        };
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let mut heads = Vec::with_capacity(config.heads);
            for p in 0..config.heads {
                let q = find(format!("{prefix}.layer{l}.head{p}.q"))?;
                let hops = (0..config.hops)
                    .map(|k| find(format!("{prefix}.layer{l}.head{p}.a{k}")))
                    .collect::<Result<_>>()?;
                heads.push(HeadIds { q, hops });
            }
            layers.push(heads);
        }
        Ok(Self {
            config: config.clone(),
            feature_dim,
            layers,
        })
    }

    pub fn config(&self) -> &GatConfig {
        &self.config
    }

    pub fn config_name(&self) -> String {
        self.config.name()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flatten()
            .flat_map(|h| std::iter::once(h.q).chain(h.hops.iter().copied()))
            .collect()
    }

    /// Runs the cascade on the tape; `s` is the adjacency as a constant.
    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, x: Var, s: Var) -> Result<Var> {
        let mut h = x;
        for heads in &self.layers {
            let vars: Vec<HeadVars> = heads
                .iter()
                .map(|ids| {
                    let q = tape.param(store, ids.q);
                    let hops = ids.hops.iter().map(|&a| tape.param(store, a)).collect();
                    (q, hops)
                })
                .collect();
            h = layer_on_tape(tape, h, s, &vars, self.config.activation, self.config.attention_slope)?;
        }
        Ok(h)
    }

    /// Current parameter values as plain layer structs.
    pub fn layer_params(&self, store: &ParamStore) -> Vec<GatLayerParams> {
        self.layers
            .iter()
            .map(|heads| GatLayerParams {
                heads: heads
                    .iter()
                    .map(|ids| GatHeadParams {
                        q: store.get(ids.q).clone(),
                        hops: ids.hops.iter().map(|&a| store.get(a).clone()).collect(),
                    })
                    .collect(),
                activation: self.config.activation,
                leaky_slope: self.config.attention_slope,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::oracle::message_passing_oracle;
    use crate::graph::topology::NodeKind;
    use crate::numeric::{gradient_check, leaky_relu};
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_graph(n: usize, density: f64, rng: &mut ChaCha8Rng) -> GraphTopology {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random::<f64>() < density {
                    edges.push((i, j));
                }
            }
        }
        GraphTopology::new(vec![NodeKind::Slot; n], (0..n).map(|i| format!("n{i}")).collect(), &edges).unwrap()
    }

    fn complete(n: usize) -> GraphTopology {
        let edges: Vec<_> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        GraphTopology::new(vec![NodeKind::Slot; n], vec![String::new(); n], &edges).unwrap()
    }

    fn random_head(f: usize, k: usize, rng: &mut ChaCha8Rng) -> GatHeadParams {
        GatHeadParams {
            hops: (0..k).map(|_| Matrix::random_normal(f, f, 0.5, rng)).collect(),
            q: Matrix::random_normal(f, f, 0.5, rng),
        }
    }

    fn layer(heads: Vec<GatHeadParams>, activation: Activation) -> GatLayerParams {
        GatLayerParams {
            heads,
            activation,
            leaky_slope: 0.2,
        }
    }

    #[test]
    fn zero_q_gives_uniform_attention() {
        let g = complete(3);
        let x = Matrix::random_normal(3, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let head = GatHeadParams {
            hops: vec![Matrix::identity(4)],
            q: Matrix::zeros(4, 4),
        };
        let e = attention_matrix(&x, g.adjacency(), &head, 0.2).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(e.get(i, j), if i == j { 0.0 } else { 0.5 });
            }
        }
    }

    #[test]
    fn isolated_node_has_zero_attention_row() {
        let g = GraphTopology::new(vec![NodeKind::Slot; 3], vec![String::new(); 3], &[(0, 1)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Matrix::random_normal(3, 2, 1.0, &mut rng);
        let e = attention_matrix(&x, g.adjacency(), &random_head(2, 1, &mut rng), 0.2).unwrap();
        assert_eq!(e.row(2), &[0.0, 0.0, 0.0]);
        assert!((e.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn attention_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_graph(5, 0.6, &mut rng);
        let x = Matrix::random_normal(5, 3, 1.0, &mut rng);
        let head = random_head(3, 1, &mut rng);
        let e = attention_matrix(&x, g.adjacency(), &head, 0.2).unwrap();
        let lrelu = |v: f64| if v > 0.0 { v } else { 0.2 * v };
        for i in 0..5 {
            let score = |j: usize| {
                let mut s = 0.0;
                for a in 0..3 {
                    for b in 0..3 {
                        s += x.get(i, a) * head.q.get(a, b) * x.get(j, b);
                    }
                }
                lrelu(s).exp()
            };
            let denom: f64 = g.neighbors(i).map(score).sum();
            for j in 0..5 {
                let expected = if g.has_edge(i, j) { score(j) / denom } else { 0.0 };
                assert!((e.get(i, j) - expected).abs() < 1e-12, "({i},{j})");
            }
        }
    }

    #[test]
    fn single_hop_identity_returns_input() {
        let g = complete(4);
        let x = Matrix::random_normal(4, 3, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let head = GatHeadParams {
            hops: vec![Matrix::identity(3)],
            q: Matrix::random_normal(3, 3, 1.0, &mut ChaCha8Rng::seed_from_u64(5)),
        };
        let e = attention_matrix(&x, g.adjacency(), &head, 0.2).unwrap();
        assert_eq!(head_aggregate(&x, g.adjacency(), &e, &head).unwrap(), x);
        let out = gat_layer_forward(&x, &g, &layer(vec![head], Activation::Identity)).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn second_hop_only_is_one_exchange() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = random_graph(5, 0.5, &mut rng);
        let x = Matrix::random_normal(5, 3, 1.0, &mut rng);
        let head = GatHeadParams {
            hops: vec![Matrix::zeros(3, 3), Matrix::identity(3)],
            q: Matrix::random_normal(3, 3, 1.0, &mut rng),
        };
        let e = attention_matrix(&x, g.adjacency(), &head, 0.2).unwrap();
        let expected = e.hadamard(g.adjacency()).unwrap().matmul(&x).unwrap();
        assert!(head_aggregate(&x, g.adjacency(), &e, &head).unwrap().max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn zero_hops_is_a_contract_violation() {
        let g = complete(2);
        let x = Matrix::zeros(2, 2);
        let head = GatHeadParams {
            hops: vec![],
            q: Matrix::zeros(2, 2),
        };
        let err = head_aggregate(&x, g.adjacency(), &Matrix::zeros(2, 2), &head).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn identical_heads_equal_single_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = random_graph(5, 0.7, &mut rng);
        let x = Matrix::random_normal(5, 3, 1.0, &mut rng);
        let head = random_head(3, 3, &mut rng);
        let one = gat_layer_forward(&x, &g, &layer(vec![head.clone()], Activation::default())).unwrap();
        let two = gat_layer_forward(&x, &g, &layer(vec![head.clone(), head.clone()], Activation::default())).unwrap();
        assert!(one.max_abs_diff(&two) < 1e-14);

        let plain = gat_layer_forward(&x, &g, &layer(vec![head.clone()], Activation::Identity)).unwrap();
        let e = attention_matrix(&x, g.adjacency(), &head, 0.2).unwrap();
        assert_eq!(plain, head_aggregate(&x, g.adjacency(), &e, &head).unwrap());
        assert!(one.max_abs_diff(&leaky_relu(&plain, 0.2)) < 1e-14);
    }

    #[test]
    fn head_disagreement_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = complete(3);
        let x = Matrix::zeros(3, 3);
        let bad = layer(vec![random_head(3, 2, &mut rng), random_head(3, 1, &mut rng)], Activation::Identity);
        assert!(gat_layer_forward(&x, &g, &bad).is_err());
        let wide = layer(vec![random_head(4, 1, &mut rng)], Activation::Identity);
        assert!(matches!(gat_layer_forward(&x, &g, &wide), Err(Error::Shape { .. })));
    }

    #[test]
    fn stack_composes_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = random_graph(6, 0.5, &mut rng);
        let x = Matrix::random_normal(6, 3, 1.0, &mut rng);
        assert_eq!(gat_stack_forward(&x, &g, &[]).unwrap(), x);
        let l1 = layer(vec![random_head(3, 2, &mut rng), random_head(3, 2, &mut rng)], Activation::default());
        let l2 = layer(vec![random_head(3, 2, &mut rng)], Activation::Tanh);
        let twice = gat_layer_forward(&gat_layer_forward(&x, &g, &l1).unwrap(), &g, &l2).unwrap();
        assert_eq!(gat_stack_forward(&x, &g, &[l1, l2]).unwrap(), twice);
    }

    #[test]
    fn slot_slice_keeps_leading_rows() {
        let g = GraphTopology::new(
            vec![NodeKind::Slot, NodeKind::Slot, NodeKind::Value, NodeKind::Value, NodeKind::Value],
            vec![String::new(); 5],
            &[(0, 2), (1, 3)],
        )
        .unwrap();
        let x = Matrix::random_normal(5, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(10));
        let s = slice_slot_outputs(&x, &g).unwrap();
        assert_eq!(s.shape(), (2, 4));
        assert_eq!(s.row(1), x.row(1));
        assert_eq!(slice_slot_outputs(&x.slice_rows(0, 2).unwrap(), &complete(2)).unwrap().shape(), (2, 4));
    }

    #[test]
    fn config_names() {
        assert_eq!(GatConfig::no_graph().name(), "L0P0K0-NoGraph");
        let c = GatConfig {
            graph_type: GraphType::DsGraph,
            layers: 3,
            heads: 4,
            hops: 2,
            ..Default::default()
        };
        assert_eq!(c.name(), "L3P4K2-DSGraph");
        let bad = GatConfig {
            layers: 1,
            ..GatConfig::no_graph()
        };
        assert!(bad.validate().is_err());
        let stray_heads = GatConfig {
            heads: 2,
            ..GatConfig::no_graph()
        };
        assert!(stray_heads.validate().is_err());
        let empty_graph = GatConfig {
            layers: 0,
            ..Default::default()
        };
        assert!(empty_graph.validate().is_err());
    }

    #[test]
    fn gradients_match_finite_differences_on_both_topologies() {
        use crate::data::{Ontology, SlotSpec};
        let ontology = Ontology::new(
            vec!["d".into()],
            (0..3)
                .map(|i| SlotSpec {
                    domain: "d".into(),
                    slot: format!("s{i}"),
                    description: "d s".into(),
                    candidates: vec![i % 2, 1],
                })
                .collect(),
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        for topo in [
            crate::graph::build_ds_graph(&ontology).unwrap(),
            crate::graph::build_dsv_graph(&ontology).unwrap(),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut store = ParamStore::new();
            let cfg = GatConfig {
                layers: 2,
                heads: 2,
                hops: 3,
                ..Default::default()
            };
            let stack = GatStack::init(&cfg, 3, &mut store, "gat", &mut rng).unwrap();
            let x = Matrix::random_normal(topo.node_count(), 3, 1.0, &mut rng);
            let w = Matrix::random_normal(topo.node_count(), 3, 1.0, &mut rng);
            let report = gradient_check(
                &store,
                &stack.param_ids(),
                |s, tape| {
                    let xv = tape.constant(x.clone());
                    let sv = tape.constant(topo.adjacency().clone());
                    let wv = tape.constant(w.clone());
                    let out = stack.forward(s, tape, xv, sv)?;
                    let weighted = tape.mul(out, wv)?;
                    Ok(tape.sum(weighted))
                },
                1e-6,
                1e-4,
            )
            .unwrap();
            assert!(report.passed(), "{:?}", report.failures.first());
            assert_eq!(report.checked, 2 * 2 * 4 * 9);
        }
    }

    #[test]
    fn plain_and_tape_stacks_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let g = random_graph(5, 0.6, &mut rng);
        let mut store = ParamStore::new();
        let stack = GatStack::init(&GatConfig::default(), 4, &mut store, "g", &mut rng).unwrap();
        let x = Matrix::random_normal(5, 4, 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let sv = tape.constant(g.adjacency().clone());
        let out = stack.forward(&store, &mut tape, xv, sv).unwrap();
        let plain = gat_stack_forward(&x, &g, &stack.layer_params(&store)).unwrap();
        assert_eq!(tape.value(out), &plain);

        let again = GatStack::attach(&GatConfig::default(), 4, &store, "g").unwrap();
        assert_eq!(again, stack);
        assert!(GatStack::attach(&GatConfig::default(), 5, &store, "g").is_err());
    }

    /// Evaluates one head through the explicit message-passing oracle.
    fn oracle_head(x: &Matrix, s: &Matrix, e: &Matrix, head: &GatHeadParams) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), head.hops[0].cols());
        for (k, a) in head.hops.iter().enumerate() {
            let m = message_passing_oracle(x, s, e, k).unwrap();
            out.add_assign(&m.matmul(a).unwrap());
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn head_matches_oracle(seed in any::<u64>(), n in 1usize..=6, k in 1usize..=3, f in 1usize..=4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_graph(n, 0.5, &mut rng);
            let x = Matrix::random_normal(n, f, 1.0, &mut rng);
            let head = random_head(f, k, &mut rng);
            let e = attention_matrix(&x, g.adjacency(), &head, 0.2).unwrap();
            let fast = head_aggregate(&x, g.adjacency(), &e, &head).unwrap();
            prop_assert!(fast.max_abs_diff(&oracle_head(&x, g.adjacency(), &e, &head)) < 1e-10);
        }

        #[test]
        fn attention_rows_are_stochastic_over_neighbours(seed in any::<u64>(), n in 1usize..=7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_graph(n, 0.5, &mut rng);
            let x = Matrix::random_normal(n, 3, 2.0, &mut rng);
            let e = attention_matrix(&x, g.adjacency(), &random_head(3, 1, &mut rng), 0.2).unwrap();
            for i in 0..n {
                let total: f64 = e.row(i).iter().sum();
                if g.neighbors(i).next().is_some() {
                    prop_assert!((total - 1.0).abs() < 1e-9);
                } else {
                    prop_assert_eq!(total, 0.0);
                }
                for j in 0..n {
                    if !g.has_edge(i, j) {
                        prop_assert_eq!(e.get(i, j), 0.0);
                    }
                }
            }
        }

        #[test]
        fn stack_is_permutation_equivariant(seed in any::<u64>(), n in 2usize..=6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_graph(n, 0.6, &mut rng);
            let mut store = ParamStore::new();
            let stack = GatStack::init(&GatConfig::default(), 3, &mut store, "g", &mut rng).unwrap();
            let layers = stack.layer_params(&store);
            let x = Matrix::random_normal(n, 3, 1.0, &mut rng);
            let mut perm: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            let direct = gat_stack_forward(&x, &g, &layers).unwrap().permute_rows(&perm);
            let permuted = gat_stack_forward(&x.permute_rows(&perm), &g.permuted(&perm).unwrap(), &layers).unwrap();
            prop_assert!(direct.max_abs_diff(&permuted) < 1e-8);
        }

        #[test]
        fn one_layer_is_local_to_hop_radius(seed in any::<u64>(), n in 2usize..=6, k in 1usize..=3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_graph(n, 0.4, &mut rng);
            let dist = g.distances();
            let mut store = ParamStore::new();
            let cfg = GatConfig { layers: 1, heads: 2, hops: k, ..Default::default() };
            let stack = GatStack::init(&cfg, 3, &mut store, "g", &mut rng).unwrap();
            let x = Matrix::random_normal(n, 3, 1.0, &mut rng);
            for i in 0..n {
                let mut tape = Tape::new();
                let xv = tape.input(x.clone());
                let sv = tape.constant(g.adjacency().clone());
                let out = stack.forward(&store, &mut tape, xv, sv).unwrap();
                let row = tape.slice_rows(out, i, i + 1).unwrap();
                let w = tape.constant(Matrix::random_normal(1, 3, 1.0, &mut rng));
                let weighted = tape.mul(row, w).unwrap();
                let loss = tape.sum(weighted);
                let grads = tape.backward(loss).unwrap();
                let gx = grads.var(xv).unwrap();
                for j in 0..n {
                    if dist[i][j].is_none_or(|d| d >= k) {
                        prop_assert!(gx.row(j).iter().all(|&v| v == 0.0), "i={} j={} d={:?}", i, j, dist[i][j]);
                    }
                }
            }
        }
    }
}
