//! Sparse undirected graphs, edge-flip perturbations and normalized
//! propagation operators.

mod io;
mod operator;

use serde::{Deserialize, Serialize};
use std::collections::{HashSet, VecDeque};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub use io::{load_graph, save_graph, save_graph_with_header};
pub use operator::{build_normalized, NormalizedOperator, OperatorKind};
pub(crate) use operator::PropagationPattern;

/// Undirected graph with node features and (partially known) labels.
///
/// Edges are stored once as `(u, v)` with `u < v`, sorted and duplicate-free.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    features: Matrix,
    labels: Vec<Option<usize>>,
    num_classes: usize,
}

impl Graph {
    /// Builds a graph, canonicalizing every edge to `u < v` and dropping
    /// duplicates. Self-loops and out-of-range endpoints are rejected.
    pub fn new(
        n: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        features: Matrix,
        labels: Vec<Option<usize>>,
        num_classes: usize,
    ) -> Result<Self> {
        let mut canon = Vec::new();
        for (a, b) in edges {
            let (u, v) = if a < b { (a, b) } else { (b, a) };
            if u == v {
                return Err(Error::Constraint(format!("self-loop on node {u}")));
            }
            if v >= n {
                return Err(Error::Dimension(format!("edge ({a}, {b}) outside {n} nodes")));
            }
            canon.push((u, v));
        }
        canon.sort_unstable();
        canon.dedup();
        if features.rows() != n {
            return Err(Error::Dimension(format!(
                "feature matrix has {} rows for {n} nodes",
                features.rows()
            )));
        }
        if labels.len() != n {
            return Err(Error::Dimension(format!("{} labels for {n} nodes", labels.len())));
        }
        if let Some(bad) = labels.iter().flatten().find(|&&y| y >= num_classes) {
            return Err(Error::Constraint(format!(
                "label {bad} outside {num_classes} classes"
            )));
        }
        Ok(Graph { n, edges: canon, features, labels, num_classes })
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        let key = if u < v { (u, v) } else { (v, u) };
        self.edges.binary_search(&key).is_ok()
    }

    /// Number of incident edges per node.
    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.n];
        for &(u, v) in &self.edges {
            d[u] += 1;
            d[v] += 1;
        }
        d
    }

    pub fn adjacency_lists(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        adj
    }

    /// Labels of `nodes`, failing if any of them is unknown.
    pub fn known_labels(&self, nodes: &[usize]) -> Result<Vec<usize>> {
        nodes
            .iter()
            .map(|&i| {
                self.labels
                    .get(i)
                    .copied()
                    .flatten()
                    .ok_or_else(|| Error::Constraint(format!("node {i} has no known label")))
            })
            .collect()
    }

    /// Subgraph induced by `nodes`; node `nodes[k]` becomes node `k`.
    pub fn induced_subgraph(&self, nodes: &[usize]) -> Result<Graph> {
        let mut map = vec![usize::MAX; self.n];
        for (k, &i) in nodes.iter().enumerate() {
            if i >= self.n {
                return Err(Error::Dimension(format!("node {i} outside {} nodes", self.n)));
            }
            if map[i] != usize::MAX {
                return Err(Error::Constraint(format!("node {i} listed twice")));
            }
            map[i] = k;
        }
        let edges = self.edges.iter().filter_map(|&(u, v)| {
            let (a, b) = (map[u], map[v]);
            (a != usize::MAX && b != usize::MAX).then_some((a, b))
        });
        Graph::new(
            nodes.len(),
            edges,
            self.features.select_rows(nodes),
            nodes.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
        )
    }

    /// Node sets of connected components, largest first (ties: smallest
    /// minimum node index first). Each set is sorted.
    pub fn connected_components(&self) -> Vec<Vec<usize>> {
        let adj = self.adjacency_lists();
        let mut seen = vec![false; self.n];
        let mut comps = Vec::new();
        for s in 0..self.n {
            if seen[s] {
                continue;
            }
            seen[s] = true;
            let mut comp = vec![s];
            let mut queue = VecDeque::from([s]);
            while let Some(u) = queue.pop_front() {
                for &v in &adj[u] {
                    if !seen[v] {
                        seen[v] = true;
                        comp.push(v);
                        queue.push_back(v);
                    }
                }
            }
            comp.sort_unstable();
            comps.push(comp);
        }
        comps.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
        comps
    }

    /// Largest connected component and the original index of every kept node.
    pub fn largest_connected_component(&self) -> Result<(Graph, Vec<usize>)> {
        if self.edges.is_empty() {
            return Err(Error::Parameter(
                "graph has no edges, largest connected component is undefined".into(),
            ));
        }
        let nodes = self.connected_components().swap_remove(0);
        Ok((self.induced_subgraph(&nodes)?, nodes))
    }

    /// Graph with every slot in `flips` toggled.
    pub fn apply_flips(&self, flips: &EdgeFlips) -> Result<Graph> {
        if flips.is_empty() {
            return Ok(self.clone());
        }
        let toggled: HashSet<(usize, usize)> = flips.slots().iter().copied().collect();
        let mut edges: Vec<(usize, usize)> = self
            .edges
            .iter()
            .copied()
            .filter(|e| !toggled.contains(e))
            .collect();
        for &(u, v) in flips.slots() {
            if v >= self.n {
                return Err(Error::Dimension(format!("flip ({u}, {v}) outside {} nodes", self.n)));
            }
            if !self.has_edge(u, v) {
                edges.push((u, v));
            }
        }
        Graph::new(self.n, edges, self.features.clone(), self.labels.clone(), self.num_classes)
    }

    pub fn with_labels(&self, labels: Vec<Option<usize>>) -> Result<Graph> {
        Graph::new(
            self.n,
            self.edges.iter().copied(),
            self.features.clone(),
            labels,
            self.num_classes,
        )
    }
}

/// Binary structure perturbation: the set of toggled upper-triangular slots.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EdgeFlips {
    slots: Vec<(usize, usize)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlipOp {
    Add,
    Del,
}

impl EdgeFlips {
    pub fn new(slots: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut out = Vec::new();
        for (a, b) in slots {
            let (u, v) = if a < b { (a, b) } else { (b, a) };
            if u == v {
                return Err(Error::Constraint(format!("flip of self-loop slot ({u}, {u})")));
            }
            out.push((u, v));
        }
        out.sort_unstable();
        let before = out.len();
        out.dedup();
        if out.len() != before {
            return Err(Error::Constraint("duplicate flip slot".into()));
        }
        Ok(EdgeFlips { slots: out })
    }

    pub fn empty() -> Self {
        EdgeFlips::default()
    }

    pub fn slots(&self) -> &[(usize, usize)] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Number of flips incident to every node.
    pub fn incident_counts(&self, n: usize) -> Vec<usize> {
        let mut c = vec![0; n];
        for &(u, v) in &self.slots {
            c[u] += 1;
            c[v] += 1;
        }
        c
    }

    /// `[u, v, op]` entries relative to `graph`.
    pub fn to_ops(&self, graph: &Graph) -> Vec<(usize, usize, FlipOp)> {
        self.slots
            .iter()
            .map(|&(u, v)| {
                let op = if graph.has_edge(u, v) { FlipOp::Del } else { FlipOp::Add };
                (u, v, op)
            })
            .collect()
    }

    pub fn to_json(&self, graph: &Graph) -> Result<String> {
        Ok(serde_json::to_string(&self.to_ops(graph))?)
    }

    /// Parses the `[[u, v, "add"|"del"], ...]` format, checking every op
    /// against `graph`.
    pub fn from_json(text: &str, graph: &Graph) -> Result<Self> {
        let ops: Vec<(usize, usize, FlipOp)> = serde_json::from_str(text)?;
        for &(u, v, op) in &ops {
            let expected = if graph.has_edge(u, v) { FlipOp::Del } else { FlipOp::Add };
            if op != expected {
                return Err(Error::Constraint(format!(
                    "flip ({u}, {v}) marked {op:?} but the graph calls for {expected:?}"
                )));
            }
        }
        EdgeFlips::new(ops.into_iter().map(|(u, v, _)| (u, v)))
    }
}

/// Continuous perturbation `p ∈ [0,1]` on a set of upper-triangular slots.
///
/// The perturbed adjacency is `Ã_uv = A_uv + (1 - 2 A_uv) p_uv`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedPerturbation {
    n: usize,
    slots: Vec<(usize, usize)>,
    values: Vec<f64>,
}

impl RelaxedPerturbation {
    /// Slots must satisfy `u < v < n` and be unique. Values are checked when
    /// the perturbation is applied.
    pub fn new(n: usize, slots: Vec<(usize, usize)>, values: Vec<f64>) -> Result<Self> {
        if slots.len() != values.len() {
            return Err(Error::Dimension(format!(
                "{} slots but {} values",
                slots.len(),
                values.len()
            )));
        }
        let mut seen = HashSet::with_capacity(slots.len());
        for &(u, v) in &slots {
            if !(u < v && v < n) {
                return Err(Error::Constraint(format!("slot ({u}, {v}) invalid for {n} nodes")));
            }
            if !seen.insert((u, v)) {
                return Err(Error::Constraint(format!("slot ({u}, {v}) registered twice")));
            }
        }
        Ok(RelaxedPerturbation { n, slots, values })
    }

    pub fn zeros(n: usize, slots: Vec<(usize, usize)>) -> Result<Self> {
        let values = vec![0.0; slots.len()];
        Self::new(n, slots, values)
    }

    pub fn from_flips(n: usize, flips: &EdgeFlips) -> Result<Self> {
        Self::new(n, flips.slots().to_vec(), vec![1.0; flips.len()])
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn slots(&self) -> &[(usize, usize)] {
        &self.slots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub(crate) fn check_values(&self) -> Result<()> {
        match self.values.iter().position(|p| !(0.0..=1.0).contains(p)) {
            Some(i) => Err(Error::Constraint(format!(
                "perturbation value {} at slot {:?} outside [0, 1]",
                self.values[i], self.slots[i]
            ))),
            None => Ok(()),
        }
    }
}
