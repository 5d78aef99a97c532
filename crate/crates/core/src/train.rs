//! Standard, self- and adversarial training, and the memorizing wrapper.

use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig, AttackKind, AttackTarget};
use crate::data::{training_view, validation_view, GraphView, Split};
use crate::graph::{EdgeFlips, Graph, RelaxedPerturbation};
use crate::linalg::Matrix;
use crate::model::{loss_value, Adam, DiffusionModel, LossKind, Mode, ModelSpec, Predictor};
use crate::rng::{self, derive_seed};
use crate::{Error, Result};

fn default_max_epochs() -> usize {
    300
}
fn default_warmup() -> usize {
    10
}
fn default_patience() -> usize {
    50
}
fn default_lr() -> f64 {
    1e-2
}
fn default_wd() -> f64 {
    1e-3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default)]
    pub loss: LossKind,
    /// Attack crafted against the current model every epoch after warm-up.
    #[serde(default)]
    pub attack: Option<AttackConfig>,
    #[serde(default)]
    pub self_training: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: default_max_epochs(),
            warmup_epochs: default_warmup(),
            patience: default_patience(),
            lr: default_lr(),
            weight_decay: default_wd(),
            loss: LossKind::CrossEntropy,
            attack: None,
            self_training: false,
            seed: 0,
        }
    }
}

/// Attack used inside adversarial training: 20 epochs, no finetuning, and
/// a 20× learning rate for LR-BCD.
pub fn training_attack(kind: AttackKind, epsilon: f64) -> AttackConfig {
    let mut a = AttackConfig::new(kind, epsilon);
    a.epochs = 20;
    a.finetune = 0;
    if kind == AttackKind::Lrbcd {
        a.lr_multiplier = 20.0;
    }
    a
}

impl TrainConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs > self.max_epochs {
            return Err(Error::Config("warmup_epochs exceeds max_epochs".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr must be positive and weight_decay non-negative".into()));
        }
        if let Some(a) = &self.attack {
            a.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub attacked: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub model: DiffusionModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Number of attack runs (training and validation).
    pub attack_calls: usize,
    /// `(original node, pseudo-label)` pairs when self-training was used.
    pub pseudo_labels: Vec<(usize, usize)>,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_metric,attacked\n");
    for r in history {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_metric, u8::from(r.attacked)));
    }
    out
}

/// Nodes and labels a training run fits, in view coordinates.
struct Fit<'a> {
    view: &'a GraphView,
    idx: Vec<usize>,
    labels: Vec<usize>,
    val_view: &'a GraphView,
    val_idx: Vec<usize>,
    val_labels: Vec<usize>,
}

fn perturb(
    model: &DiffusionModel,
    graph: &Graph,
    targets: &[usize],
    labels: &[usize],
    attack: &AttackConfig,
    seed: u64,
) -> Result<Graph> {
    let config = AttackConfig { seed, ..attack.clone() };
    let budget = config.budget(graph, targets)?;
    let at = AttackTarget { graph, targets, labels };
    let flips = attack::attack(model, &at, &budget, &config)?;
    graph.apply_flips(&flips)
}

fn fit(spec: &ModelSpec, fit: &Fit, config: &TrainConfig, attack: Option<&AttackConfig>, stage: &str) -> Result<TrainOutcome> {
    config.validate()?;
    let graph = &fit.view.graph;
    let mut model = DiffusionModel::init(
        spec,
        graph.feature_dim(),
        graph.num_classes(),
        derive_seed(config.seed, &format!("{stage}-init")),
    )?;
    let mut adam = Adam::new(config.lr, config.weight_decay);
    let mut dropout = rng::stream(config.seed, &format!("{stage}-dropout"));
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, DiffusionModel)> = None;
    let mut since_best = 0;
    let mut attack_calls = 0;
    for epoch in 0..config.max_epochs {
        let attacked = attack.filter(|_| epoch >= config.warmup_epochs);
        let train_graph = match attacked {
            Some(a) => {
                attack_calls += 1;
                let seed = derive_seed(config.seed, &format!("{stage}-attack-{epoch}"));
                perturb(&model, graph, &fit.idx, &fit.labels, a, seed)?
            }
            None => graph.clone(),
        };
        let mut pass = model.forward(&train_graph, None, Mode::Train(&mut dropout))?;
        let loss = pass.loss(config.loss, &fit.idx, &fit.labels)?;
        let train_loss = pass.value(loss);
        if !train_loss.is_finite() {
            return Err(Error::Training(format!("non-finite training loss at epoch {epoch}")));
        }
        let grads = pass.backward_params(loss)?;
        if !grads.is_finite() {
            return Err(Error::Training(format!("non-finite gradient at epoch {epoch}")));
        }
        adam.step(&mut model, &grads)?;

        let val_graph = match attacked {
            Some(a) => {
                attack_calls += 1;
                let seed = derive_seed(config.seed, &format!("{stage}-val-attack-{epoch}"));
                perturb(&model, &fit.val_view.graph, &fit.val_idx, &fit.val_labels, a, seed)?
            }
            None => fit.val_view.graph.clone(),
        };
        let val_metric = loss_value(&model.predict_logits(&val_graph)?, config.loss, &fit.val_idx, &fit.val_labels)?;
        if !val_metric.is_finite() {
            return Err(Error::Training(format!("non-finite validation loss at epoch {epoch}")));
        }
        history.push(EpochRecord { epoch, train_loss, val_metric, attacked: attacked.is_some() });
        log::debug!("{stage} epoch {epoch}: train {train_loss:.4} val {val_metric:.4}");

        if epoch < config.warmup_epochs {
            continue;
        }
        if best.as_ref().is_none_or(|(b, _, _)| val_metric < *b) {
            best = Some((val_metric, epoch, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    let (best_epoch, model) = match best {
        Some((_, e, m)) => (e, m),
        None => (history.len().saturating_sub(1), model),
    };
    Ok(TrainOutcome { model, history, best_epoch, attack_calls, pseudo_labels: Vec::new() })
}

fn base_fit<'a>(graph: &Graph, split: &Split, view: &'a GraphView, val_view: &'a GraphView) -> Result<Fit<'a>> {
    Ok(Fit {
        view,
        idx: view.local(&split.train_labeled)?,
        labels: graph.known_labels(&split.train_labeled)?,
        val_view,
        val_idx: val_view.local(&split.val)?,
        val_labels: graph.known_labels(&split.val)?,
    })
}

/// Clean training on the labeled training nodes.
pub fn train_standard(spec: &ModelSpec, graph: &Graph, split: &Split, config: &TrainConfig) -> Result<TrainOutcome> {
    let view = training_view(graph, split)?;
    let val_view = validation_view(graph, split)?;
    fit(spec, &base_fit(graph, split, &view, &val_view)?, config, None, "standard")
}

/// Adversarial training with the configured attack after the warm-up.
pub fn train_adversarial(spec: &ModelSpec, graph: &Graph, split: &Split, config: &TrainConfig) -> Result<TrainOutcome> {
    let attack = config
        .attack
        .as_ref()
        .ok_or_else(|| Error::Config("adversarial training needs an attack".into()))?;
    let view = training_view(graph, split)?;
    let val_view = validation_view(graph, split)?;
    fit(spec, &base_fit(graph, split, &view, &val_view)?, config, Some(attack), "adversarial")
}

/// Two stages: a clean model pseudo-labels every unlabeled training-view
/// node outside the validation set, then a fresh model fits true and
/// pseudo labels (adversarially if an attack is configured).
pub fn self_train(spec: &ModelSpec, graph: &Graph, split: &Split, config: &TrainConfig) -> Result<TrainOutcome> {
    let view = training_view(graph, split)?;
    let val_view = validation_view(graph, split)?;
    let base = base_fit(graph, split, &view, &val_view)?;
    let teacher = fit(spec, &base, config, None, "teacher")?;
    let preds = teacher.model.predict(&view.graph)?;

    let mut skip = vec![false; graph.num_nodes()];
    for &i in split.train_labeled.iter().chain(&split.val) {
        skip[i] = true;
    }
    let mut pseudo = Vec::new();
    let mut pairs: Vec<(usize, usize)> = base.idx.iter().copied().zip(base.labels.iter().copied()).collect();
    for (local, &orig) in view.nodes.iter().enumerate() {
        if !skip[orig] {
            pseudo.push((orig, preds[local]));
            pairs.push((local, preds[local]));
        }
    }
    pairs.sort_unstable();
    let student = Fit {
        idx: pairs.iter().map(|p| p.0).collect(),
        labels: pairs.iter().map(|p| p.1).collect(),
        ..base
    };
    let mut out = fit(spec, &student, config, config.attack.as_ref(), "student")?;
    out.attack_calls += teacher.attack_calls;
    out.pseudo_labels = pseudo;
    Ok(out)
}

/// Dispatches on the self-training flag and the attack.
pub fn train(spec: &ModelSpec, graph: &Graph, split: &Split, config: &TrainConfig) -> Result<TrainOutcome> {
    match (config.self_training, &config.attack) {
        (true, _) => self_train(spec, graph, split, config),
        (false, Some(_)) => train_adversarial(spec, graph, split, config),
        (false, None) => train_standard(spec, graph, split, config),
    }
}

/// Replays the predictions on the clean graph it was built from, whatever
/// graph it is shown afterwards.
#[derive(Clone, Debug)]
pub struct MemorizedModel {
    logits: Matrix,
}

pub fn memorize(model: &dyn Predictor, clean: &Graph) -> Result<MemorizedModel> {
    Ok(MemorizedModel { logits: model.logits(clean)? })
}

impl MemorizedModel {
    pub fn num_nodes(&self) -> usize {
        self.logits.rows()
    }

    fn check(&self, graph: &Graph) -> Result<()> {
        if graph.num_nodes() != self.num_nodes() {
            return Err(Error::Shape(format!(
                "memorized {} nodes but got a graph with {}",
                self.num_nodes(),
                graph.num_nodes()
            )));
        }
        Ok(())
    }
}

impl Predictor for MemorizedModel {
    fn logits(&self, graph: &Graph) -> Result<Matrix> {
        self.check(graph)?;
        Ok(self.logits.clone())
    }

    fn attack_gradient(
        &self,
        graph: &Graph,
        perturbation: &RelaxedPerturbation,
        targets: &[usize],
        labels: &[usize],
        loss: LossKind,
    ) -> Result<(f64, Vec<f64>)> {
        self.check(graph)?;
        Ok((loss_value(&self.logits, loss, targets, labels)?, vec![0.0; perturbation.len()]))
    }
}

/// Accuracy of `model` on `targets` of `graph` after `flips`.
pub fn accuracy_under(
    model: &dyn Predictor,
    graph: &Graph,
    flips: &EdgeFlips,
    targets: &[usize],
    labels: &[usize],
) -> Result<f64> {
    let g = if flips.is_empty() { graph.clone() } else { graph.apply_flips(flips)? };
    Ok(crate::model::accuracy(&model.predict(&g)?, targets, labels))
}
