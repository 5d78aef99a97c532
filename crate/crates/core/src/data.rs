//! Synthetic graphs and the split protocol.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::linalg::Matrix;
use crate::rng;

/// Contextual stochastic block model with two classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsbmParams {
    pub n: usize,
    /// feature dimension
    pub d: usize,
    /// feature standard deviation
    pub sigma: f64,
    /// class separation; the class means are `±K σ / (2 √d)` per coordinate
    pub k: f64,
    pub p_in: f64,
    pub q_out: f64,
    #[serde(default)]
    pub seed: u64,
}

impl CsbmParams {
    /// σ = 1, K = 1.5, d = 21, p = 0.15 %, q = 0.63 %.
    pub fn heterophilic(n: usize, seed: u64) -> Self {
        CsbmParams { n, d: 21, sigma: 1.0, k: 1.5, p_in: 0.0015, q_out: 0.0063, seed }
    }

    /// Same features with the edge probabilities swapped (p = 0.63 %,
    /// q = 0.15 %), the maximum-likelihood fit to Cora.
    pub fn homophilic(n: usize, seed: u64) -> Self {
        CsbmParams { p_in: 0.0063, q_out: 0.0015, ..CsbmParams::heterophilic(n, seed) }
    }

    /// Scales both edge probabilities so the expected degree matches a
    /// graph with `reference_n` nodes.
    pub fn with_degree_of(mut self, reference_n: usize) -> Self {
        let f = reference_n as f64 / self.n as f64;
        self.p_in = (self.p_in * f).min(1.0);
        self.q_out = (self.q_out * f).min(1.0);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Parameter(format!("CSBM needs at least 2 nodes, got {}", self.n)));
        }
        if self.d < 1 {
            return Err(Error::Parameter("CSBM feature dimension must be >= 1".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Parameter(format!("sigma must be > 0, got {}", self.sigma)));
        }
        for (name, p) in [("p_in", self.p_in), ("q_out", self.q_out)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Parameter(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if !self.k.is_finite() {
            return Err(Error::Parameter("K must be finite".into()));
        }
        Ok(())
    }

    /// Per-coordinate magnitude of the class mean.
    pub fn mean_offset(&self) -> f64 {
        self.k * self.sigma / (2.0 * (self.d as f64).sqrt())
    }
}

/// Samples the CSBM without extracting the largest connected component.
pub fn sample_csbm_raw(params: &CsbmParams) -> Result<Graph> {
    params.validate()?;
    let n = params.n;
    let mut rng = rng::stream(params.seed, "csbm");
    let labels: Vec<usize> = (0..n).map(|_| usize::from(rng.random_bool(0.5))).collect();
    let noise = Normal::new(0.0, params.sigma)
        .map_err(|e| Error::Parameter(format!("feature distribution: {e}")))?;
    let mu = params.mean_offset();
    let mut x = Matrix::zeros(n, params.d);
    for i in 0..n {
        let m = if labels[i] == 1 { mu } else { -mu };
        for v in x.row_mut(i) {
            *v = m + noise.sample(&mut rng);
        }
    }
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if labels[u] == labels[v] { params.p_in } else { params.q_out };
            if p > 0.0 && rng.random_bool(p) {
                edges.push((u, v));
            }
        }
    }
    Graph::new(n, edges, x, labels.into_iter().map(Some).collect(), 2)
}

/// Samples the CSBM and keeps its largest connected component.
pub fn sample_csbm(params: &CsbmParams) -> Result<Graph> {
    let g = sample_csbm_raw(params)?;
    Ok(g.largest_connected_component()?.0)
}

const KARATE_EDGES: [(usize, usize); 78] = [
    (0, 1), (0, 2), (0, 3), (0, 4), (0, 5), (0, 6), (0, 7), (0, 8), (0, 10), (0, 11),
    (0, 12), (0, 13), (0, 17), (0, 19), (0, 21), (0, 31), (1, 2), (1, 3), (1, 7), (1, 13),
    (1, 17), (1, 19), (1, 21), (1, 30), (2, 3), (2, 7), (2, 8), (2, 9), (2, 13), (2, 27),
    (2, 28), (2, 32), (3, 7), (3, 12), (3, 13), (4, 6), (4, 10), (5, 6), (5, 10), (5, 16),
    (6, 16), (8, 30), (8, 32), (8, 33), (9, 33), (13, 33), (14, 32), (14, 33), (15, 32),
    (15, 33), (18, 32), (18, 33), (19, 33), (20, 32), (20, 33), (22, 32), (22, 33),
    (23, 25), (23, 27), (23, 29), (23, 32), (23, 33), (24, 25), (24, 27), (24, 31),
    (25, 31), (26, 29), (26, 33), (27, 33), (28, 31), (28, 33), (29, 32), (29, 33),
    (30, 32), (30, 33), (31, 32), (31, 33), (32, 33),
];

const KARATE_CLUB: [usize; 34] = [
    0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 1, 0, 0, 1, 0, 1, 0, 1, 1, 1, 1, 1, 1, 1, 1,
    1, 1, 1, 1,
];

/// Zachary's Karate Club with the two-club labels and identity features.
pub fn karate_club() -> Graph {
    Graph::new(
        34,
        KARATE_EDGES,
        Matrix::identity(34),
        KARATE_CLUB.iter().map(|&c| Some(c)).collect(),
        2,
    )
    .expect("karate club fixture is valid")
}

/// Disjoint node index sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train_labeled: Vec<usize>,
    pub train_unlabeled: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub inductive: bool,
}

impl Split {
    /// Checks disjointness and bounds.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self
            .train_labeled
            .iter()
            .chain(&self.train_unlabeled)
            .chain(&self.val)
            .chain(&self.test)
        {
            if i >= n {
                return Err(Error::Split(format!("node {i} outside {n} nodes")));
            }
            if seen[i] {
                return Err(Error::Split(format!("node {i} appears in two sets")));
            }
            seen[i] = true;
        }
        Ok(())
    }

    pub fn train_nodes(&self) -> Vec<usize> {
        let mut v: Vec<usize> =
            self.train_labeled.iter().chain(&self.train_unlabeled).copied().collect();
        v.sort_unstable();
        v
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Samples `per_class_train` labeled training and `per_class_val` validation
/// nodes per class plus a test set stratified by class. Everything else
/// (including nodes without label) becomes unlabeled training data.
pub fn make_split(
    graph: &Graph,
    per_class_train: usize,
    per_class_val: usize,
    test_fraction: f64,
    inductive: bool,
    seed: u64,
) -> Result<Split> {
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(Error::Parameter(format!("test fraction {test_fraction} outside [0, 1]")));
    }
    let mut rng = rng::stream(seed, "split");
    let mut by_class = vec![Vec::new(); graph.num_classes()];
    let mut unlabeled = Vec::new();
    for (i, y) in graph.labels().iter().enumerate() {
        match y {
            Some(c) => by_class[*c].push(i),
            None => unlabeled.push(i),
        }
    }
    let mut split = Split {
        train_labeled: Vec::new(),
        train_unlabeled: unlabeled,
        val: Vec::new(),
        test: Vec::new(),
        inductive,
    };
    for (class, mut nodes) in by_class.into_iter().enumerate() {
        let n_test = (test_fraction * nodes.len() as f64).round() as usize;
        let need = per_class_train + per_class_val + n_test;
        if nodes.len() < need {
            return Err(Error::Split(format!(
                "class {class} has {} nodes but the split needs {need}",
                nodes.len()
            )));
        }
        nodes.shuffle(&mut rng);
        let (train, rest) = nodes.split_at(per_class_train);
        let (val, rest) = rest.split_at(per_class_val);
        let (test, rest) = rest.split_at(n_test);
        split.train_labeled.extend_from_slice(train);
        split.val.extend_from_slice(val);
        split.test.extend_from_slice(test);
        split.train_unlabeled.extend_from_slice(rest);
    }
    for set in [
        &mut split.train_labeled,
        &mut split.train_unlabeled,
        &mut split.val,
        &mut split.test,
    ] {
        set.sort_unstable();
    }
    Ok(split)
}

/// A graph restricted to a node subset, remembering where every node came
/// from.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphView {
    pub graph: Graph,
    /// `nodes[k]` is the original index of view node `k`; sorted ascending
    pub nodes: Vec<usize>,
}

impl GraphView {
    pub fn identity(graph: &Graph) -> Self {
        GraphView { graph: graph.clone(), nodes: (0..graph.num_nodes()).collect() }
    }

    pub fn induced(graph: &Graph, mut nodes: Vec<usize>) -> Result<Self> {
        nodes.sort_unstable();
        nodes.dedup();
        Ok(GraphView { graph: graph.induced_subgraph(&nodes)?, nodes })
    }

    /// Maps original indices into view indices.
    pub fn local(&self, original: &[usize]) -> Result<Vec<usize>> {
        original
            .iter()
            .map(|i| {
                self.nodes
                    .binary_search(i)
                    .map_err(|_| Error::Split(format!("node {i} is not part of this view")))
            })
            .collect()
    }

    /// Re-adds `extra` nodes of `original` together with all their edges.
    pub fn extend(&self, original: &Graph, extra: &[usize]) -> Result<Self> {
        let nodes: Vec<usize> = self.nodes.iter().chain(extra).copied().collect();
        GraphView::induced(original, nodes)
    }
}

/// The graph training sees: train nodes only for inductive splits, the full
/// graph otherwise.
pub fn training_view(graph: &Graph, split: &Split) -> Result<GraphView> {
    split.validate(graph.num_nodes())?;
    if split.inductive {
        GraphView::induced(graph, split.train_nodes())
    } else {
        Ok(GraphView::identity(graph))
    }
}

/// Training view plus the validation nodes.
pub fn validation_view(graph: &Graph, split: &Split) -> Result<GraphView> {
    if split.inductive {
        training_view(graph, split)?.extend(graph, &split.val)
    } else {
        training_view(graph, split)
    }
}

/// Training view plus validation and test nodes.
pub fn evaluation_view(graph: &Graph, split: &Split) -> Result<GraphView> {
    if split.inductive {
        validation_view(graph, split)?.extend(graph, &split.test)
    } else {
        training_view(graph, split)
    }
}
