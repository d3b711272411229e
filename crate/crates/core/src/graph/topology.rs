use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Ontology;
use crate::error::{Error, Result};
use crate::numeric::Matrix;

const FORMAT_HEADER: &str = "gatdst-topology v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Slot,
    Value,
}

/// Which graph the tracker attaches to its slot features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GraphType {
    #[serde(rename = "DSGraph")]
    DsGraph,
    #[serde(rename = "DSVGraph")]
    DsvGraph,
    #[serde(rename = "NoGraph")]
    NoGraph,
}

impl GraphType {
    pub fn name(self) -> &'static str {
        match self {
            GraphType::DsGraph => "DSGraph",
            GraphType::DsvGraph => "DSVGraph",
            GraphType::NoGraph => "NoGraph",
        }
    }
}

impl fmt::Display for GraphType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GraphType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dsgraph" | "ds" => Ok(GraphType::DsGraph),
            "dsvgraph" | "dsv" => Ok(GraphType::DsvGraph),
            "nograph" | "none" => Ok(GraphType::NoGraph),
            _ => Err(Error::Config(format!(
                "unknown graph type {s:?} (expected DSGraph, DSVGraph or NoGraph)"
            ))),
        }
    }
}

/// Undirected graph without self-loops. Slot nodes always come first.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphTopology {
    kinds: Vec<NodeKind>,
    labels: Vec<String>,
    adjacency: Matrix,
}

impl GraphTopology {
    /// Builds a topology from an undirected edge list.
    pub fn new(kinds: Vec<NodeKind>, labels: Vec<String>, edges: &[(usize, usize)]) -> Result<Self> {
        let n = kinds.len();
        if labels.len() != n {
            return Err(Error::Topology(format!("{} kinds but {} labels", n, labels.len())));
        }
        let mut adjacency = Matrix::zeros(n, n);
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::Topology(format!("edge ({i}, {j}) outside {n} nodes")));
            }
            if i == j {
                return Err(Error::Topology(format!("self-loop on node {i}")));
            }
            adjacency.set(i, j, 1.0);
            adjacency.set(j, i, 1.0);
        }
        Ok(Self {
            kinds,
            labels,
            adjacency,
        })
    }

    pub fn node_count(&self) -> usize {
        self.kinds.len()
    }

    pub fn kinds(&self) -> &[NodeKind] {
        &self.kinds
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Binary symmetric `S` with a zero diagonal.
    pub fn adjacency(&self) -> &Matrix {
        &self.adjacency
    }

    /// Number of leading slot nodes.
    pub fn slot_count(&self) -> usize {
        self.kinds.iter().take_while(|k| **k == NodeKind::Slot).count()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency.get(i, j) != 0.0
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.node_count()).filter(move |&j| self.has_edge(i, j))
    }

    /// Undirected edges as `(i, j)` with `i < j`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.node_count();
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.has_edge(i, j))
            .collect()
    }

    /// All-pairs hop distances; `None` for unreachable pairs.
    pub fn distances(&self) -> Vec<Vec<Option<usize>>> {
        let n = self.node_count();
        (0..n)
            .map(|src| {
                let mut dist = vec![None; n];
                dist[src] = Some(0);
                let mut queue = VecDeque::from([src]);
                while let Some(u) = queue.pop_front() {
                    let du = dist[u].expect("queued nodes have a distance");
                    for v in self.neighbors(u) {
                        if dist[v].is_none() {
                            dist[v] = Some(du + 1);
                            queue.push_back(v);
                        }
                    }
                }
                dist
            })
            .collect()
    }

    /// Checks that slot nodes precede value nodes.
    pub fn check_slot_prefix(&self) -> Result<usize> {
        let n_ds = self.slot_count();
        if let Some(i) = self.kinds[n_ds..].iter().position(|k| *k == NodeKind::Slot) {
            return Err(Error::Topology(format!(
                "slot node {} appears after value nodes start at {n_ds}",
                n_ds + i
            )));
        }
        Ok(n_ds)
    }

    /// Node-ordering permutation: new node `r` is old node `perm[r]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.node_count();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Topology(format!("{perm:?} is not a permutation of {n} nodes")));
        }
        let mut pos = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            pos[old] = new;
        }
        let edges: Vec<_> = self.edges().into_iter().map(|(i, j)| (pos[i], pos[j])).collect();
        Self::new(
            perm.iter().map(|&p| self.kinds[p]).collect(),
            perm.iter().map(|&p| self.labels[p].clone()).collect(),
            &edges,
        )
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{FORMAT_HEADER}\nnodes {}\n", self.node_count());
        for (k, l) in self.kinds.iter().zip(&self.labels) {
            let kind = match k {
                NodeKind::Slot => "slot",
                NodeKind::Value => "value",
            };
            out.push_str(&format!("{kind} {l}\n"));
        }
        let edges = self.edges();
        out.push_str(&format!("edges {}\n", edges.len()));
        for (i, j) in edges {
            out.push_str(&format!("{i} {j}\n"));
        }
        out
    }

    pub fn from_text(text: &str, source_name: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end()));
        let fail = |line: usize, message: String| Error::Parse {
            source_name: source_name.to_string(),
            line,
            column: 1,
            message,
        };
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| fail(0, format!("unexpected end of input, expected {what}")))
        };
        let count = |(no, line): (usize, &str), key: &str| -> Result<usize> {
            line.strip_prefix(key)
                .and_then(|r| r.trim().parse().ok())
                .ok_or_else(|| fail(no, format!("expected `{key} <count>`, found {line:?}")))
        };

        let (no, header) = next("header")?;
        if header != FORMAT_HEADER {
            return Err(fail(no, format!("expected {FORMAT_HEADER:?}, found {header:?}")));
        }
        let n = count(next("node count")?, "nodes")?;
        let mut kinds = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let (no, line) = next("node line")?;
            let (kind, label) = line.split_once(' ').unwrap_or((line, ""));
            kinds.push(match kind {
                "slot" => NodeKind::Slot,
                "value" => NodeKind::Value,
                other => return Err(fail(no, format!("unknown node kind {other:?}"))),
            });
            labels.push(label.to_string());
        }
        let m = count(next("edge count")?, "edges")?;
        let mut edges = Vec::with_capacity(m);
        for _ in 0..m {
            let (no, line) = next("edge line")?;
            let parsed: Option<(usize, usize)> = line
                .split_once(' ')
                .and_then(|(a, b)| Some((a.parse().ok()?, b.trim().parse().ok()?)));
            match parsed {
                Some((i, j)) if i < j => edges.push((i, j)),
                _ => return Err(fail(no, format!("expected edge `i j` with i < j, found {line:?}"))),
            }
        }
        Self::new(kinds, labels, &edges)
    }
}

/// Complete graph over the ontology's domain-slots.
pub fn build_ds_graph(ontology: &Ontology) -> Result<GraphTopology> {
    let n = ontology.slot_count();
    if n == 0 {
        return Err(Error::Topology("ontology has no domain-slots".into()));
    }
    let edges: Vec<_> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    GraphTopology::new(vec![NodeKind::Slot; n], ontology.slot_keys(), &edges)
}

/// Bipartite graph linking each slot to its candidate values. Slots occupy
/// nodes `0..N_ds`, value `v` is node `N_ds + v`.
pub fn build_dsv_graph(ontology: &Ontology) -> Result<GraphTopology> {
    let n_ds = ontology.slot_count();
    if n_ds == 0 {
        return Err(Error::Topology("ontology has no domain-slots".into()));
    }
    if ontology.value_count() == 0 {
        return Err(Error::Topology("ontology has no values".into()));
    }
    let mut kinds = vec![NodeKind::Slot; n_ds];
    kinds.extend(std::iter::repeat_n(NodeKind::Value, ontology.value_count()));
    let mut labels = ontology.slot_keys();
    labels.extend(ontology.values().iter().cloned());
    let edges: Vec<_> = ontology
        .slots()
        .iter()
        .enumerate()
        .flat_map(|(s, spec)| spec.candidates.iter().map(move |&v| (s, n_ds + v)))
        .collect();
    GraphTopology::new(kinds, labels, &edges)
}

/// Topology for `graph_type`; `None` for the graph-free baseline.
pub fn build_topology(graph_type: GraphType, ontology: &Ontology) -> Result<Option<GraphTopology>> {
    match graph_type {
        GraphType::DsGraph => build_ds_graph(ontology).map(Some),
        GraphType::DsvGraph => build_dsv_graph(ontology).map(Some),
        GraphType::NoGraph => Ok(None),
    }
}
