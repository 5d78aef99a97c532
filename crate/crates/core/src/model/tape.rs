//! Minimal reverse-mode tape over dense matrices and one sparse propagation
//! primitive.
//!
//! Nodes are appended in evaluation order, so the node index is a
//! topological order and the reverse sweep simply walks indices downwards.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::graph::PropagationPattern;
use crate::linalg::Matrix;

pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Relu(NodeId),
    Dropout(NodeId, Vec<f64>),
    Scale(NodeId, f64),
    /// `alpha * a + beta * b`
    Axpby { a: NodeId, b: NodeId, alpha: f64, beta: f64 },
    /// `matrix · x` with a constant matrix
    LinearMap { x: NodeId, matrix: Matrix },
    /// `Σ_k coef_k · terms_k`
    Combine { terms: Vec<NodeId>, coef: NodeId },
    EdgeWeights { p: NodeId, pattern: Rc<PropagationPattern> },
    Normalize { w: NodeId, pattern: Rc<PropagationPattern>, degrees: Vec<f64> },
    Spmm { values: NodeId, x: NodeId, pattern: Rc<PropagationPattern> },
    CrossEntropy { logits: NodeId, idx: Vec<usize>, probs: Matrix, labels: Vec<usize> },
    TanhMargin { logits: NodeId, idx: Vec<usize>, labels: Vec<usize>, cache: Vec<(usize, f64)> },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root w.r.t. every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id).and_then(Option::as_ref)
    }
}

fn check_targets(logits: &Matrix, idx: &[usize], labels: &[usize]) -> Result<()> {
    if idx.is_empty() {
        return Err(Error::Parameter("loss over an empty index set".into()));
    }
    if idx.len() != labels.len() {
        return Err(Error::Dimension(format!("{} indices but {} labels", idx.len(), labels.len())));
    }
    if let Some(&i) = idx.iter().find(|&&i| i >= logits.rows()) {
        return Err(Error::Dimension(format!("index {i} outside {} rows", logits.rows())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(Error::Dimension(format!("label {y} outside {} classes", logits.cols())));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        self.nodes.len() - 1
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds the `1 × cols` row `bias` to every row of `x`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let b = self.value(bias);
        if b.rows() != 1 || b.cols() != self.value(x).cols() {
            return Err(Error::Shape(format!(
                "bias {:?} does not fit {:?}",
                b.shape(),
                self.value(x).shape()
            )));
        }
        let mut v = self.value(x).clone();
        let b = self.value(bias).row(0).to_vec();
        for i in 0..v.rows() {
            for (o, bj) in v.row_mut(i).iter_mut().zip(&b) {
                *o += bj;
            }
        }
        Ok(self.push(v, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut v = self.value(x).clone();
        for o in v.data_mut() {
            if *o < 0.0 {
                *o = 0.0;
            }
        }
        self.push(v, Op::Relu(x), &[x])
    }

    /// Multiplies elementwise by `mask` (already scaled by `1 / keep`).
    pub fn dropout(&mut self, x: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        if mask.len() != self.value(x).data().len() {
            return Err(Error::Shape("dropout mask does not match input".into()));
        }
        let mut v = self.value(x).clone();
        for (o, m) in v.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        Ok(self.push(v, Op::Dropout(x, mask), &[x]))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x).scale(c);
        self.push(v, Op::Scale(x, c), &[x])
    }

    pub fn axpby(&mut self, a: NodeId, b: NodeId, alpha: f64, beta: f64) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape("axpby operands differ in shape".into()));
        }
        let mut v = self.value(a).scale(alpha);
        v.add_scaled(self.value(b), beta);
        Ok(self.push(v, Op::Axpby { a, b, alpha, beta }, &[a, b]))
    }

    pub fn linear_map(&mut self, x: NodeId, matrix: Matrix) -> Result<NodeId> {
        let v = matrix.matmul(self.value(x))?;
        Ok(self.push(v, Op::LinearMap { x, matrix }, &[x]))
    }

    /// `Σ_k coef_k · terms_k` for a column of coefficients. Terms with a zero
    /// coefficient are left out of the sum (so `coef = e_0` returns `terms_0`
    /// bit for bit) but still receive coefficient gradients.
    pub fn combine(&mut self, terms: Vec<NodeId>, coef: NodeId) -> Result<NodeId> {
        let c = self.value(coef).data().to_vec();
        if terms.is_empty() || c.len() < terms.len() {
            return Err(Error::Shape(format!(
                "{} coefficients for {} terms",
                c.len(),
                terms.len()
            )));
        }
        let shape = self.value(terms[0]).shape();
        if terms.iter().any(|&t| self.value(t).shape() != shape) {
            return Err(Error::Shape("combined terms differ in shape".into()));
        }
        let mut out: Option<Matrix> = None;
        for (&t, &ck) in terms.iter().zip(&c) {
            if ck == 0.0 {
                continue;
            }
            match out.as_mut() {
                None => out = Some(self.value(t).scale(ck)),
                Some(o) => o.add_scaled(self.value(t), ck),
            }
        }
        let v = out.unwrap_or_else(|| Matrix::zeros(shape.0, shape.1));
        let mut inputs = terms.clone();
        inputs.push(coef);
        Ok(self.push(v, Op::Combine { terms, coef }, &inputs))
    }

    pub(crate) fn edge_weights(&mut self, p: NodeId, pattern: Rc<PropagationPattern>) -> Result<NodeId> {
        if self.value(p).data().len() != pattern.num_slots() {
            return Err(Error::Shape("perturbation length does not match the pattern".into()));
        }
        let w = pattern.edge_weights(self.value(p).data());
        Ok(self.push(Matrix::column(w), Op::EdgeWeights { p, pattern }, &[p]))
    }

    pub(crate) fn normalize(&mut self, w: NodeId, pattern: Rc<PropagationPattern>) -> NodeId {
        let (values, degrees) = pattern.normalize(self.value(w).data());
        self.push(Matrix::column(values), Op::Normalize { w, pattern, degrees }, &[w])
    }

    pub(crate) fn spmm(
        &mut self,
        values: NodeId,
        x: NodeId,
        pattern: Rc<PropagationPattern>,
    ) -> Result<NodeId> {
        if self.value(x).rows() != pattern.n {
            return Err(Error::Shape(format!(
                "propagation over {} nodes applied to {} rows",
                pattern.n,
                self.value(x).rows()
            )));
        }
        let v = pattern.spmm(self.value(values).data(), self.value(x));
        Ok(self.push(v, Op::Spmm { values, x, pattern }, &[values, x]))
    }

    /// Mean softmax cross-entropy over the rows `idx` with targets `labels`.
    pub fn cross_entropy(&mut self, logits: NodeId, idx: &[usize], labels: &[usize]) -> Result<NodeId> {
        let z = self.value(logits);
        check_targets(z, idx, labels)?;
        let mut probs = Matrix::zeros(idx.len(), z.cols());
        let mut total = 0.0;
        for (r, (&i, &y)) in idx.iter().zip(labels).enumerate() {
            let row = z.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let log_sum = m + sum.ln();
            total += log_sum - row[y];
            for (p, v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - log_sum).exp();
            }
        }
        let loss = Matrix::scalar(total / idx.len() as f64);
        let op = Op::CrossEntropy { logits, idx: idx.to_vec(), probs, labels: labels.to_vec() };
        Ok(self.push(loss, op, &[logits]))
    }

    /// Mean of `tanh(max_{c≠y} z_c − z_y)` over the rows `idx`.
    pub fn tanh_margin(&mut self, logits: NodeId, idx: &[usize], labels: &[usize]) -> Result<NodeId> {
        let z = self.value(logits);
        if z.cols() < 2 {
            return Err(Error::Parameter("tanh margin needs at least two classes".into()));
        }
        check_targets(z, idx, labels)?;
        let mut cache = Vec::with_capacity(idx.len());
        let mut total = 0.0;
        for (&i, &y) in idx.iter().zip(labels) {
            let row = z.row(i);
            let mut best = usize::MAX;
            for (c, &v) in row.iter().enumerate() {
                if c != y && (best == usize::MAX || v > row[best]) {
                    best = c;
                }
            }
            let t = (row[best] - row[y]).tanh();
            total += t;
            cache.push((best, t));
        }
        let loss = Matrix::scalar(total / idx.len() as f64);
        let op = Op::TanhMargin { logits, idx: idx.to_vec(), labels: labels.to_vec(), cache };
        Ok(self.push(loss, op, &[logits]))
    }

    /// Reverse sweep from the scalar `root`.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if root >= self.nodes.len() {
            return Err(Error::Tape(format!("node {root} is not on the tape")));
        }
        if self.value(root).shape() != (1, 1) {
            return Err(Error::Tape(format!(
                "backward needs a scalar root, node {root} has shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Matrix::scalar(1.0));
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match grads[id].as_mut() {
            Some(acc) => acc.add_scaled(&g, 1.0),
            None => grads[id] = Some(g),
        }
    }

    fn propagate(&self, id: NodeId, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[*a].requires_grad {
                    let ga = g.matmul_t(self.value(*b))?;
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[*b].requires_grad {
                    let gb = self.value(*a).t_matmul(g)?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.nodes[*b].requires_grad {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, v) in gb.row_mut(0).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Relu(x) => {
                let mut gx = g.clone();
                for (o, &y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                    if y <= 0.0 {
                        *o = 0.0;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Dropout(x, mask) => {
                let mut gx = g.clone();
                for (o, m) in gx.data_mut().iter_mut().zip(mask) {
                    *o *= m;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.scale(*c)),
            Op::Axpby { a, b, alpha, beta } => {
                self.accumulate(grads, *a, g.scale(*alpha));
                self.accumulate(grads, *b, g.scale(*beta));
            }
            Op::LinearMap { x, matrix } => {
                if self.nodes[*x].requires_grad {
                    self.accumulate(grads, *x, matrix.t_matmul(g)?);
                }
            }
            Op::Combine { terms, coef } => {
                let c = self.value(*coef).data();
                if self.nodes[*coef].requires_grad {
                    let mut gc = Matrix::zeros(self.value(*coef).rows(), 1);
                    for (k, &t) in terms.iter().enumerate() {
                        gc.data_mut()[k] = crate::linalg::dot(g.data(), self.value(t).data());
                    }
                    self.accumulate(grads, *coef, gc);
                }
                for (&t, &ck) in terms.iter().zip(c) {
                    if ck != 0.0 && self.nodes[t].requires_grad {
                        self.accumulate(grads, t, g.scale(ck));
                    }
                }
            }
            Op::EdgeWeights { p, pattern } => {
                let gp = pattern.edge_weights_backward(g.data());
                self.accumulate(grads, *p, Matrix::column(gp));
            }
            Op::Normalize { w, pattern, degrees } => {
                let gw = pattern.normalize_backward(node.value.data(), degrees, g.data());
                self.accumulate(grads, *w, Matrix::column(gw));
            }
            Op::Spmm { values, x, pattern } => {
                let (gv, gx) = pattern.spmm_backward(
                    self.value(*values).data(),
                    self.value(*x),
                    g,
                    self.nodes[*values].requires_grad,
                    self.nodes[*x].requires_grad,
                );
                if let Some(gv) = gv {
                    self.accumulate(grads, *values, Matrix::column(gv));
                }
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::CrossEntropy { logits, idx, probs, labels } => {
                let z = self.value(*logits);
                let scale = g.data()[0] / idx.len() as f64;
                let mut gz = Matrix::zeros(z.rows(), z.cols());
                for (r, (&i, &y)) in idx.iter().zip(labels).enumerate() {
                    let row = gz.row_mut(i);
                    for (o, p) in row.iter_mut().zip(probs.row(r)) {
                        *o += scale * p;
                    }
                    row[y] -= scale;
                }
                self.accumulate(grads, *logits, gz);
            }
            Op::TanhMargin { logits, idx, labels, cache } => {
                let z = self.value(*logits);
                let scale = g.data()[0] / idx.len() as f64;
                let mut gz = Matrix::zeros(z.rows(), z.cols());
                for ((&i, &y), &(best, t)) in idx.iter().zip(labels).zip(cache) {
                    let d = scale * (1.0 - t * t);
                    gz[(i, best)] += d;
                    gz[(i, y)] -= d;
                }
                self.accumulate(grads, *logits, gz);
            }
        }
        Ok(())
    }
}
