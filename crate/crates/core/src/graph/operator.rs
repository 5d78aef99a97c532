use serde::{Deserialize, Serialize};

use super::{Graph, RelaxedPerturbation};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Which normalized adjacency to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    /// `D^-1/2 A D^-1/2`
    Normalized,
    /// `D̊^-1/2 (A + I) D̊^-1/2`
    SelfLoop,
    /// `-D^-1/2 A D^-1/2`, spectrum in `[-1, 1]`
    Shifted,
}

impl OperatorKind {
    fn self_loop(self) -> bool {
        matches!(self, OperatorKind::SelfLoop)
    }

    fn sign(self) -> f64 {
        match self {
            OperatorKind::Shifted => -1.0,
            _ => 1.0,
        }
    }
}

const SELF: usize = usize::MAX;

/// Fixed sparsity pattern of a (possibly perturbed) normalized operator.
///
/// Every clean edge and every perturbation slot owns one weighted edge
/// `w_e = A_e + (1 - 2 A_e) p_e`; each weighted edge contributes the two
/// symmetric CSR entries. Entries are kept even when their weight is zero so
/// gradients can flow through them.
#[derive(Debug, Clone)]
pub(crate) struct PropagationPattern {
    pub n: usize,
    pub kind: OperatorKind,
    edge_u: Vec<usize>,
    edge_v: Vec<usize>,
    base: Vec<f64>,
    /// edge index owned by every perturbation slot
    slot_edge: Vec<usize>,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    /// edge index behind every CSR entry, `SELF` for the self-loop
    entry_edge: Vec<usize>,
}

impl PropagationPattern {
    pub fn new(
        graph: &Graph,
        kind: OperatorKind,
        perturbation: Option<&RelaxedPerturbation>,
    ) -> Result<Self> {
        let n = graph.num_nodes();
        let mut edge_u: Vec<usize> = graph.edges().iter().map(|e| e.0).collect();
        let mut edge_v: Vec<usize> = graph.edges().iter().map(|e| e.1).collect();
        let mut base = vec![1.0; edge_u.len()];
        let mut slot_edge = Vec::new();
        if let Some(p) = perturbation {
            if p.num_nodes() != n {
                return Err(Error::Dimension(format!(
                    "perturbation over {} nodes applied to a graph with {n}",
                    p.num_nodes()
                )));
            }
            slot_edge.reserve(p.len());
            for &(u, v) in p.slots() {
                match graph.edges().binary_search(&(u, v)) {
                    Ok(e) => slot_edge.push(e),
                    Err(_) => {
                        slot_edge.push(edge_u.len());
                        edge_u.push(u);
                        edge_v.push(v);
                        base.push(0.0);
                    }
                }
            }
        }

        let mut counts = vec![usize::from(kind.self_loop()); n];
        for (&u, &v) in edge_u.iter().zip(&edge_v) {
            counts[u] += 1;
            counts[v] += 1;
        }
        let mut indptr = Vec::with_capacity(n + 1);
        indptr.push(0);
        for c in &counts {
            indptr.push(indptr.last().unwrap() + c);
        }
        let nnz = *indptr.last().unwrap();
        let mut fill = indptr[..n].to_vec();
        let mut indices = vec![0; nnz];
        let mut entry_edge = vec![0; nnz];
        let mut put = |row: usize, col: usize, e: usize| {
            indices[fill[row]] = col;
            entry_edge[fill[row]] = e;
            fill[row] += 1;
        };
        if kind.self_loop() {
            for i in 0..n {
                put(i, i, SELF);
            }
        }
        for (e, (&u, &v)) in edge_u.iter().zip(&edge_v).enumerate() {
            put(u, v, e);
            put(v, u, e);
        }
        // canonical column order inside each row
        for i in 0..n {
            let (a, b) = (indptr[i], indptr[i + 1]);
            let mut row: Vec<(usize, usize)> =
                indices[a..b].iter().copied().zip(entry_edge[a..b].iter().copied()).collect();
            row.sort_unstable_by_key(|&(c, _)| c);
            for (k, (c, e)) in row.into_iter().enumerate() {
                indices[a + k] = c;
                entry_edge[a + k] = e;
            }
        }
        Ok(PropagationPattern { n, kind, edge_u, edge_v, base, slot_edge, indptr, indices, entry_edge })
    }

    pub fn num_edges(&self) -> usize {
        self.base.len()
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn num_slots(&self) -> usize {
        self.slot_edge.len()
    }

    /// `w_e` for every weighted edge given the slot values `p`.
    pub fn edge_weights(&self, p: &[f64]) -> Vec<f64> {
        let mut w = self.base.clone();
        for (&e, &pv) in self.slot_edge.iter().zip(p) {
            let a = self.base[e];
            w[e] = a + (1.0 - 2.0 * a) * pv;
        }
        w
    }

    pub fn edge_weights_backward(&self, dw: &[f64]) -> Vec<f64> {
        self.slot_edge.iter().map(|&e| (1.0 - 2.0 * self.base[e]) * dw[e]).collect()
    }

    /// Weighted degrees (self-loop included for [`OperatorKind::SelfLoop`]).
    pub fn degrees(&self, w: &[f64]) -> Vec<f64> {
        let mut d = vec![if self.kind.self_loop() { 1.0 } else { 0.0 }; self.n];
        for ((&u, &v), &we) in self.edge_u.iter().zip(&self.edge_v).zip(w) {
            d[u] += we;
            d[v] += we;
        }
        d
    }

    /// CSR entry values `± w_e / sqrt(d_i d_j)`; zero-degree rows stay zero.
    pub fn normalize(&self, w: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.degrees(w);
        let sign = self.kind.sign();
        let mut values = vec![0.0; self.nnz()];
        for i in 0..self.n {
            for k in self.indptr[i]..self.indptr[i + 1] {
                let j = self.indices[k];
                let e = self.entry_edge[k];
                let we = if e == SELF { 1.0 } else { w[e] };
                let dij = d[i] * d[j];
                values[k] = if dij > 0.0 { sign * we / dij.sqrt() } else { 0.0 };
            }
        }
        (values, d)
    }

    /// Gradient w.r.t. the edge weights given the gradient w.r.t. the values.
    pub fn normalize_backward(&self, values: &[f64], d: &[f64], dvalues: &[f64]) -> Vec<f64> {
        let mut dw = vec![0.0; self.num_edges()];
        let mut dd = vec![0.0; self.n];
        let sign = self.kind.sign();
        for i in 0..self.n {
            for k in self.indptr[i]..self.indptr[i + 1] {
                let g = dvalues[k];
                if g == 0.0 {
                    continue;
                }
                let j = self.indices[k];
                let dij = d[i] * d[j];
                if dij <= 0.0 {
                    continue;
                }
                let e = self.entry_edge[k];
                if e != SELF {
                    dw[e] += g * sign / dij.sqrt();
                }
                let v = values[k];
                dd[i] -= 0.5 * g * v / d[i];
                dd[j] -= 0.5 * g * v / d[j];
            }
        }
        for (e, (&u, &v)) in self.edge_u.iter().zip(&self.edge_v).enumerate() {
            dw[e] += dd[u] + dd[v];
        }
        dw
    }

    /// `S(values) · x`
    pub fn spmm(&self, values: &[f64], x: &Matrix) -> Matrix {
        let c = x.cols();
        let mut out = Matrix::zeros(self.n, c);
        for i in 0..self.n {
            let o = out.row_mut(i);
            for k in self.indptr[i]..self.indptr[i + 1] {
                let a = values[k];
                if a == 0.0 {
                    continue;
                }
                for (oj, &xj) in o.iter_mut().zip(x.row(self.indices[k])) {
                    *oj += a * xj;
                }
            }
        }
        out
    }

    /// Gradients of `S(values) · x` w.r.t. the values and `x`.
    pub fn spmm_backward(
        &self,
        values: &[f64],
        x: &Matrix,
        grad: &Matrix,
        want_values: bool,
        want_x: bool,
    ) -> (Option<Vec<f64>>, Option<Matrix>) {
        let mut dvals = want_values.then(|| vec![0.0; self.nnz()]);
        let mut dx = want_x.then(|| Matrix::zeros(x.rows(), x.cols()));
        for i in 0..self.n {
            let g = grad.row(i);
            for k in self.indptr[i]..self.indptr[i + 1] {
                let j = self.indices[k];
                if let Some(dv) = dvals.as_mut() {
                    dv[k] = crate::linalg::dot(g, x.row(j));
                }
                if let Some(dx) = dx.as_mut() {
                    let a = values[k];
                    if a != 0.0 {
                        for (o, &gj) in dx.row_mut(j).iter_mut().zip(g) {
                            *o += a * gj;
                        }
                    }
                }
            }
        }
        (dvals, dx)
    }

    fn finish(&self, values: Vec<f64>, degrees: Vec<f64>) -> NormalizedOperator {
        let mut indptr = Vec::with_capacity(self.n + 1);
        indptr.push(0);
        let mut indices = Vec::new();
        let mut vals = Vec::new();
        for i in 0..self.n {
            for k in self.indptr[i]..self.indptr[i + 1] {
                if values[k] != 0.0 {
                    indices.push(self.indices[k]);
                    vals.push(values[k]);
                }
            }
            indptr.push(indices.len());
        }
        NormalizedOperator { kind: self.kind, n: self.n, indptr, indices, values: vals, degrees }
    }
}

/// Sparse symmetric normalized adjacency in CSR form. Structural zeros are
/// dropped, so removed edges leave no entry.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedOperator {
    pub kind: OperatorKind,
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
    degrees: Vec<f64>,
}

impl NormalizedOperator {
    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.indptr[i], self.indptr[i + 1]);
        match self.indices[a..b].binary_search(&j) {
            Ok(k) => self.values[a + k],
            Err(_) => 0.0,
        }
    }

    /// `(row, col, value)` for every stored entry in row-major order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| {
            (self.indptr[i]..self.indptr[i + 1]).map(move |k| (i, self.indices[k], self.values[k]))
        })
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.n, self.n);
        for (i, j, v) in self.entries() {
            m[(i, j)] = v;
        }
        m
    }

    /// `self · x`
    pub fn matmul(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.n {
            return Err(Error::Shape(format!(
                "operator over {} nodes applied to {} rows",
                self.n,
                x.rows()
            )));
        }
        let mut out = Matrix::zeros(self.n, x.cols());
        for (i, j, v) in self.entries() {
            for (o, &xv) in out.row_mut(i).iter_mut().zip(x.row(j)) {
                *o += v * xv;
            }
        }
        Ok(out)
    }
}

/// Normalized adjacency of `graph` after applying the (possibly continuous)
/// perturbation. Degrees are the sums of the continuous weights.
pub fn build_normalized(
    graph: &Graph,
    kind: OperatorKind,
    perturbation: Option<&RelaxedPerturbation>,
) -> Result<NormalizedOperator> {
    if let Some(p) = perturbation {
        p.check_values()?;
    }
    let pattern = PropagationPattern::new(graph, kind, perturbation)?;
    let p = perturbation.map_or(&[][..], |p| p.values());
    let w = pattern.edge_weights(p);
    let (values, degrees) = pattern.normalize(&w);
    Ok(pattern.finish(values, degrees))
}
