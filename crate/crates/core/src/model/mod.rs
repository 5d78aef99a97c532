//! Differentiable node classifiers: an MLP on the features followed by a
//! (possibly learnable) polynomial graph diffusion.

mod optim;
mod tape;

use std::rc::Rc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, OperatorKind, PropagationPattern, RelaxedPerturbation};
use crate::linalg::Matrix;
use crate::rng::{self, Rng};

pub use optim::Adam;
pub use tape::{Gradients, NodeId, Tape};

/// Propagation scheme after the feature MLP.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    /// no propagation, logits are the MLP output
    Mlp,
    /// two stacked propagate-transform layers over `L̊`
    Gcn,
    /// personalized PageRank coefficients over `L̊`, frozen
    Appnp,
    /// learnable `Σ γ_k L̊^k` (GPRGNN)
    Monomial,
    /// learnable Chebyshev interpolation over the shifted Laplacian (ChebNetII)
    Chebyshev,
}

/// Normalization of the Chebyshev interpolation weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChebNorm {
    /// `2/(K+1)` with the `k = 0` term halved
    #[default]
    Interpolation,
    /// `2/(K-1)` without halving
    Printed,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
    TanhMargin,
}

fn default_k() -> usize {
    10
}
fn default_hidden() -> usize {
    16
}
fn default_dropout() -> f64 {
    0.2
}
fn default_alpha() -> f64 {
    0.1
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub basis: Basis,
    /// polynomial order
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// dropout on the hidden layer
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub input_dropout: f64,
    /// dropout on the propagation matrix entries
    #[serde(default)]
    pub adj_dropout: f64,
    /// teleport probability of the APPNP basis
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub cheb_norm: ChebNorm,
}

impl ModelSpec {
    pub fn new(basis: Basis) -> Self {
        ModelSpec {
            basis,
            k: default_k(),
            hidden: default_hidden(),
            dropout: default_dropout(),
            input_dropout: 0.0,
            adj_dropout: 0.0,
            alpha: default_alpha(),
            cheb_norm: ChebNorm::default(),
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self
    }

    /// Sets all dropout rates to zero.
    pub fn without_dropout(mut self) -> Self {
        self.dropout = 0.0;
        self.input_dropout = 0.0;
        self.adj_dropout = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("dropout", self.dropout),
            ("input_dropout", self.input_dropout),
            ("adj_dropout", self.adj_dropout),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("{name} = {r} outside [0, 1)")));
            }
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        if self.basis == Basis::Appnp && !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("APPNP alpha {} outside (0, 1]", self.alpha)));
        }
        if self.basis == Basis::Chebyshev && self.cheb_norm == ChebNorm::Printed && self.k < 2 {
            return Err(Error::Config("the 2/(K-1) normalization needs K >= 2".into()));
        }
        Ok(())
    }

    fn has_gamma(&self) -> bool {
        matches!(self.basis, Basis::Appnp | Basis::Monomial | Basis::Chebyshev)
    }

    /// Operator the basis is built from; `None` for the MLP.
    pub fn operator_kind(&self) -> Option<OperatorKind> {
        match self.basis {
            Basis::Mlp => None,
            Basis::Gcn | Basis::Appnp | Basis::Monomial => Some(OperatorKind::SelfLoop),
            Basis::Chebyshev => Some(OperatorKind::Shifted),
        }
    }
}

/// `γ_l = α(1-α)^l` for `l < K` and `γ_K = (1-α)^K`.
pub fn ppr_coefficients(alpha: f64, k: usize) -> Vec<f64> {
    let mut g: Vec<f64> = (0..k).map(|l| alpha * (1.0 - alpha).powi(l as i32)).collect();
    g.push((1.0 - alpha).powi(k as i32));
    g
}

/// Chebyshev nodes `x_j = cos((j + 1/2) π / (K + 1))`, `j = 0..=K`.
pub fn chebyshev_nodes(k: usize) -> Vec<f64> {
    (0..=k)
        .map(|j| ((j as f64 + 0.5) / (k as f64 + 1.0) * std::f64::consts::PI).cos())
        .collect()
}

/// `T_k(x)` by the three-term recurrence.
pub fn chebyshev_t(k: usize, x: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, x);
    if k == 0 {
        return prev;
    }
    for _ in 1..k {
        let next = 2.0 * x * cur - prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// Matrix `M` with `c = M γ`: row `k` maps the values `γ_j` at the Chebyshev
/// nodes to the coefficient of `T_k`.
pub fn chebyshev_interpolation(k: usize, norm: ChebNorm) -> Matrix {
    let nodes = chebyshev_nodes(k);
    let mut m = Matrix::zeros(k + 1, k + 1);
    for row in 0..=k {
        let scale = match norm {
            ChebNorm::Interpolation => {
                let s = 2.0 / (k as f64 + 1.0);
                if row == 0 {
                    0.5 * s
                } else {
                    s
                }
            }
            ChebNorm::Printed => 2.0 / (k as f64 - 1.0),
        };
        for (j, &x) in nodes.iter().enumerate() {
            m[(row, j)] = scale * chebyshev_t(row, x);
        }
    }
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `in × out`
    pub w: Matrix,
    pub b: Vec<f64>,
}

/// Parameters plus architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionModel {
    pub spec: ModelSpec,
    pub layers: Vec<Layer>,
    /// `K+1` coefficients; for the Chebyshev basis the values at the nodes
    pub gamma: Vec<f64>,
    pub seed: u64,
}

pub enum Mode<'a> {
    /// dropout active, parameters tracked on the tape
    Train(&'a mut Rng),
    /// deterministic; parameters are constants
    Eval,
}

impl DiffusionModel {
    /// Glorot-uniform weights, zero biases. GPRGNN coefficients are drawn
    /// uniformly and scaled to unit ℓ1 norm; Chebyshev node values start at 1
    /// (identity filter); APPNP uses its frozen PageRank coefficients.
    pub fn init(spec: &ModelSpec, in_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        if in_dim == 0 || num_classes == 0 {
            return Err(Error::Shape("model needs features and classes".into()));
        }
        let mut rng = rng::stream(seed, "init");
        let dims = [in_dim, spec.hidden, num_classes];
        let layers = dims
            .windows(2)
            .map(|d| {
                let bound = (6.0 / (d[0] + d[1]) as f64).sqrt();
                let data = (0..d[0] * d[1]).map(|_| rng.random_range(-bound..bound)).collect();
                Layer { w: Matrix::from_vec(d[0], d[1], data).unwrap(), b: vec![0.0; d[1]] }
            })
            .collect();
        let k = spec.k;
        let gamma = match spec.basis {
            Basis::Mlp | Basis::Gcn => Vec::new(),
            Basis::Appnp => ppr_coefficients(spec.alpha, k),
            Basis::Chebyshev => vec![1.0; k + 1],
            Basis::Monomial => {
                let bound = (3.0 / (k as f64 + 1.0)).sqrt();
                let g: Vec<f64> = (0..=k).map(|_| rng.random_range(-bound..bound)).collect();
                let l1: f64 = g.iter().map(|v| v.abs()).sum();
                g.into_iter().map(|v| v / l1).collect()
            }
        };
        Ok(DiffusionModel { spec: spec.clone(), layers, gamma, seed })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].w.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().unwrap().w.cols()
    }

    fn gamma_trainable(&self) -> bool {
        matches!(self.spec.basis, Basis::Monomial | Basis::Chebyshev)
    }

    /// Coefficients of the polynomial basis actually applied: `γ` itself, or
    /// the Chebyshev coefficients interpolated from the node values.
    pub fn effective_coefficients(&self) -> Vec<f64> {
        match self.spec.basis {
            Basis::Chebyshev => {
                let m = chebyshev_interpolation(self.spec.k, self.spec.cheb_norm);
                m.matmul(&Matrix::column(self.gamma.clone())).unwrap().into_data()
            }
            _ => self.gamma.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.layers.len() != 2 {
            return Err(Error::Shape(format!("expected 2 layers, found {}", self.layers.len())));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.b.len() != l.w.cols() {
                return Err(Error::Shape(format!("layer {i}: bias does not match weights")));
            }
        }
        if self.layers[0].w.cols() != self.layers[1].w.rows() {
            return Err(Error::Shape("layer widths do not chain".into()));
        }
        let want = if self.spec.has_gamma() { self.spec.k + 1 } else { 0 };
        if self.gamma.len() != want {
            return Err(Error::Shape(format!(
                "gamma has {} entries, basis needs {want}",
                self.gamma.len()
            )));
        }
        Ok(())
    }

    /// Runs the model and records the computation on a fresh tape.
    pub fn forward(
        &self,
        graph: &Graph,
        perturbation: Option<&RelaxedPerturbation>,
        mode: Mode<'_>,
    ) -> Result<ForwardPass> {
        if graph.feature_dim() != self.in_dim() {
            return Err(Error::Shape(format!(
                "model expects {} features, graph has {}",
                self.in_dim(),
                graph.feature_dim()
            )));
        }
        if let Some(p) = perturbation {
            p.check_values()?;
        }
        let (mut rng, track) = match mode {
            Mode::Train(r) => (Some(r), true),
            Mode::Eval => (None, false),
        };
        let mut tape = Tape::new();
        let x = tape.leaf(graph.features().clone(), false);
        let layer_ids: Vec<(NodeId, NodeId)> = self
            .layers
            .iter()
            .map(|l| {
                let w = tape.leaf(l.w.clone(), track);
                let b = tape.leaf(Matrix::from_vec(1, l.b.len(), l.b.clone()).unwrap(), track);
                (w, b)
            })
            .collect();
        let pert_id = perturbation.map(|p| tape.leaf(Matrix::column(p.values().to_vec()), true));

        // propagation values
        let operator = match self.spec.operator_kind() {
            None => None,
            Some(kind) => {
                let pattern = Rc::new(PropagationPattern::new(graph, kind, perturbation)?);
                let mut values = match pert_id {
                    Some(p) => {
                        let w = tape.edge_weights(p, pattern.clone())?;
                        tape.normalize(w, pattern.clone())
                    }
                    None => {
                        let (v, _) = pattern.normalize(&pattern.edge_weights(&[]));
                        tape.leaf(Matrix::column(v), false)
                    }
                };
                if let Some(r) = rng.as_deref_mut() {
                    if self.spec.adj_dropout > 0.0 {
                        let mask = dropout_mask(r, tape.value(values).data().len(), self.spec.adj_dropout);
                        values = tape.dropout(values, mask)?;
                    }
                }
                Some((pattern, values))
            }
        };

        let mut h = x;
        if let Some(r) = rng.as_deref_mut() {
            if self.spec.input_dropout > 0.0 {
                let mask = dropout_mask(r, tape.value(h).data().len(), self.spec.input_dropout);
                h = tape.dropout(h, mask)?;
            }
        }
        let gcn = self.spec.basis == Basis::Gcn;
        for (li, &(w, b)) in layer_ids.iter().enumerate() {
            h = tape.matmul(h, w)?;
            if gcn {
                let (pattern, values) = operator.as_ref().unwrap();
                h = tape.spmm(*values, h, pattern.clone())?;
            }
            h = tape.add_bias(h, b)?;
            if li + 1 < layer_ids.len() {
                h = tape.relu(h);
                if let Some(r) = rng.as_deref_mut() {
                    if self.spec.dropout > 0.0 {
                        let mask = dropout_mask(r, tape.value(h).data().len(), self.spec.dropout);
                        h = tape.dropout(h, mask)?;
                    }
                }
            }
        }

        let mut gamma_id = None;
        let logits = match self.spec.basis {
            Basis::Mlp | Basis::Gcn => h,
            Basis::Monomial | Basis::Appnp => {
                let (pattern, values) = operator.as_ref().unwrap();
                let trainable = track && self.gamma_trainable();
                let g = tape.leaf(Matrix::column(self.gamma.clone()), trainable);
                gamma_id = Some(g);
                // without coefficient gradients, powers past the last non-zero
                // coefficient are never needed
                let last = if trainable {
                    self.spec.k
                } else {
                    self.gamma.iter().rposition(|&c| c != 0.0).unwrap_or(0)
                };
                let mut terms = vec![h];
                for _ in 0..last {
                    let prev = *terms.last().unwrap();
                    terms.push(tape.spmm(*values, prev, pattern.clone())?);
                }
                tape.combine(terms, g)?
            }
            Basis::Chebyshev => {
                let (pattern, values) = operator.as_ref().unwrap();
                let g = tape.leaf(Matrix::column(self.gamma.clone()), track);
                gamma_id = Some(g);
                let m = chebyshev_interpolation(self.spec.k, self.spec.cheb_norm);
                let coef = tape.linear_map(g, m)?;
                let mut terms = vec![h];
                if self.spec.k >= 1 {
                    terms.push(tape.spmm(*values, h, pattern.clone())?);
                }
                for k in 2..=self.spec.k {
                    let lt = tape.spmm(*values, terms[k - 1], pattern.clone())?;
                    terms.push(tape.axpby(lt, terms[k - 2], 2.0, -1.0)?);
                }
                tape.combine(terms, coef)?
            }
        };
        Ok(ForwardPass {
            tape,
            logits,
            layer_ids,
            gamma_id,
            perturbation_id: pert_id,
            params_tracked: track,
            gamma_trainable: self.gamma_trainable(),
        })
    }

    /// Eval-mode logits.
    pub fn predict_logits(&self, graph: &Graph) -> Result<Matrix> {
        let pass = self.forward(graph, None, Mode::Eval)?;
        Ok(pass.logits().clone())
    }

    /// Mutable parameter slices with their weight-decay flag, in a fixed
    /// order matching [`ModelGrads::slices`].
    pub fn params_mut(&mut self) -> Vec<(&mut [f64], bool)> {
        let trainable = self.gamma_trainable();
        let mut out: Vec<(&mut [f64], bool)> = Vec::new();
        for l in &mut self.layers {
            out.push((l.w.data_mut(), true));
            out.push((&mut l.b[..], false));
        }
        if trainable {
            out.push((&mut self.gamma[..], true));
        }
        out
    }

    pub fn to_checkpoint(&self, config_hash: Option<&str>) -> Result<String> {
        let ck = Checkpoint {
            basis: self.spec.basis,
            k: self.spec.k,
            gamma: self.gamma.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerJson { w: l.w.to_rows(), b: l.b.clone() })
                .collect(),
            seed: self.seed,
            spec: Some(self.spec.clone()),
            config_hash: config_hash.map(str::to_owned),
        };
        Ok(serde_json::to_string_pretty(&ck)?)
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        let mut spec = ck.spec.unwrap_or_else(|| ModelSpec::new(ck.basis));
        if spec.basis != ck.basis || spec.k != ck.k {
            return Err(Error::Config("checkpoint spec disagrees with basis/K".into()));
        }
        let layers = ck
            .layers
            .into_iter()
            .map(|l| Ok(Layer { w: Matrix::from_rows(&l.w)?, b: l.b }))
            .collect::<Result<Vec<_>>>()?;
        if let Some(l) = layers.first() {
            spec.hidden = l.w.cols();
        }
        let model = DiffusionModel { spec, layers, gamma: ck.gamma, seed: ck.seed };
        model.validate()?;
        Ok(model)
    }
}

fn dropout_mask(rng: &mut Rng, len: usize, rate: f64) -> Vec<f64> {
    let keep = 1.0 - rate;
    (0..len).map(|_| if rng.random_bool(keep) { 1.0 / keep } else { 0.0 }).collect()
}

#[derive(Serialize, Deserialize)]
struct LayerJson {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    basis: Basis,
    #[serde(rename = "K")]
    k: usize,
    gamma: Vec<f64>,
    layers: Vec<LayerJson>,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spec: Option<ModelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

/// Gradients shaped like the model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub layers: Vec<Layer>,
    /// `None` for bases without learnable coefficients
    pub gamma: Option<Vec<f64>>,
}

impl ModelGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            out.push(l.w.data());
            out.push(&l.b);
        }
        if let Some(g) = &self.gamma {
            out.push(g);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// A recorded forward pass.
pub struct ForwardPass {
    pub tape: Tape,
    logits: NodeId,
    layer_ids: Vec<(NodeId, NodeId)>,
    gamma_id: Option<NodeId>,
    perturbation_id: Option<NodeId>,
    params_tracked: bool,
    gamma_trainable: bool,
}

impl ForwardPass {
    pub fn logits(&self) -> &Matrix {
        self.tape.value(self.logits)
    }

    pub fn logits_id(&self) -> NodeId {
        self.logits
    }

    pub fn loss(&mut self, kind: LossKind, idx: &[usize], labels: &[usize]) -> Result<NodeId> {
        match kind {
            LossKind::CrossEntropy => self.tape.cross_entropy(self.logits, idx, labels),
            LossKind::TanhMargin => self.tape.tanh_margin(self.logits, idx, labels),
        }
    }

    pub fn value(&self, id: NodeId) -> f64 {
        self.tape.value(id).data()[0]
    }

    /// Gradients of `loss` w.r.t. the MLP weights and the coefficients.
    pub fn backward_params(&self, loss: NodeId) -> Result<ModelGrads> {
        if !self.params_tracked {
            return Err(Error::Tape("parameters are not tracked in eval mode".into()));
        }
        let grads = self.tape.backward(loss)?;
        let take = |id: NodeId| {
            grads.get(id).cloned().unwrap_or_else(|| {
                let (r, c) = self.tape.value(id).shape();
                Matrix::zeros(r, c)
            })
        };
        let layers = self
            .layer_ids
            .iter()
            .map(|&(w, b)| Layer { w: take(w), b: take(b).into_data() })
            .collect();
        let gamma = match (self.gamma_id, self.gamma_trainable) {
            (Some(g), true) => Some(take(g).into_data()),
            _ => None,
        };
        Ok(ModelGrads { layers, gamma })
    }

    /// `d loss / d p` for every slot of the perturbation passed to forward.
    pub fn backward_edges(&self, loss: NodeId) -> Result<Vec<f64>> {
        let p = self
            .perturbation_id
            .ok_or_else(|| Error::Tape("forward was run without a perturbation".into()))?;
        let grads = self.tape.backward(loss)?;
        Ok(match grads.get(p) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; self.tape.value(p).rows()],
        })
    }
}

/// Anything that can be evaluated and attacked.
pub trait Predictor {
    /// Logits on `graph` (already perturbed, if at all).
    fn logits(&self, graph: &Graph) -> Result<Matrix>;

    /// Attack objective on `targets` under the relaxed perturbation and its
    /// gradient w.r.t. every perturbation slot.
    fn attack_gradient(
        &self,
        graph: &Graph,
        perturbation: &RelaxedPerturbation,
        targets: &[usize],
        labels: &[usize],
        loss: LossKind,
    ) -> Result<(f64, Vec<f64>)>;

    fn predict(&self, graph: &Graph) -> Result<Vec<usize>> {
        Ok(self.logits(graph)?.argmax_rows())
    }
}

impl Predictor for DiffusionModel {
    fn logits(&self, graph: &Graph) -> Result<Matrix> {
        self.predict_logits(graph)
    }

    fn attack_gradient(
        &self,
        graph: &Graph,
        perturbation: &RelaxedPerturbation,
        targets: &[usize],
        labels: &[usize],
        loss: LossKind,
    ) -> Result<(f64, Vec<f64>)> {
        let mut pass = self.forward(graph, Some(perturbation), Mode::Eval)?;
        let l = pass.loss(loss, targets, labels)?;
        let g = pass.backward_edges(l)?;
        Ok((pass.value(l), g))
    }
}

/// Loss of precomputed logits.
pub fn loss_value(logits: &Matrix, kind: LossKind, idx: &[usize], labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.leaf(logits.clone(), false);
    let l = match kind {
        LossKind::CrossEntropy => tape.cross_entropy(z, idx, labels)?,
        LossKind::TanhMargin => tape.tanh_margin(z, idx, labels)?,
    };
    Ok(tape.value(l).data()[0])
}

pub fn accuracy(predictions: &[usize], idx: &[usize], labels: &[usize]) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    let hits = idx.iter().zip(labels).filter(|(&i, &y)| predictions[i] == y).count();
    hits as f64 / idx.len() as f64
}

#[cfg(test)]
mod tests;
