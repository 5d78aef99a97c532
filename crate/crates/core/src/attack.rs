//! Structure attacks, budget projections and discretization.

use std::collections::HashSet;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::graph::{EdgeFlips, Graph, RelaxedPerturbation};
use crate::model::{loss_value, LossKind, Predictor};
use crate::rng::{self, Rng};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LocalRule {
    #[default]
    HalfDegree,
    QuarterDegree,
    Unlimited,
}

/// Global flip budget plus optional per-node budgets (`None` = unlimited).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Budget {
    pub global: usize,
    pub local: Option<Vec<usize>>,
}

impl Budget {
    pub fn global_only(global: usize) -> Self {
        Budget { global, local: None }
    }

    pub fn without_local(&self) -> Self {
        Budget::global_only(self.global)
    }

    /// Exact feasibility check of a binary perturbation.
    pub fn check(&self, flips: &EdgeFlips, n: usize) -> Result<()> {
        if flips.len() > self.global {
            return Err(Error::Internal(format!(
                "{} flips exceed the global budget {}",
                flips.len(),
                self.global
            )));
        }
        if let Some(local) = &self.local {
            for (u, (&c, &b)) in flips.incident_counts(n).iter().zip(local).enumerate() {
                if c > b {
                    return Err(Error::Internal(format!("node {u} has {c} incident flips, budget {b}")));
                }
            }
        }
        Ok(())
    }
}

pub fn compute_budgets(graph: &Graph, targets: &[usize], epsilon: f64, rule: LocalRule) -> Result<Budget> {
    if targets.is_empty() {
        return Err(Error::Parameter("attack needs at least one target".into()));
    }
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::Parameter(format!("epsilon must be non-negative, got {epsilon}")));
    }
    let deg = graph.degrees();
    let mut sum = 0usize;
    for &t in targets {
        sum += *deg
            .get(t)
            .ok_or_else(|| Error::Parameter(format!("target {t} out of range")))?;
    }
    let global = (epsilon * sum as f64 / 2.0).round_ties_even() as usize;
    let local = match rule {
        LocalRule::HalfDegree => Some(deg.iter().map(|d| d / 2).collect()),
        LocalRule::QuarterDegree => Some(deg.iter().map(|d| d / 4).collect()),
        LocalRule::Unlimited => None,
    };
    Ok(Budget { global, local })
}

fn clip01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

fn shifted_sum(s: &[f64], mu: f64) -> f64 {
    s.iter().map(|&x| clip01(x - mu)).sum()
}

/// Euclidean projection onto `{p ∈ [0,1]^m : Σp ≤ Δ}`.
pub fn project_global(s: &[f64], delta: f64) -> Vec<f64> {
    if delta <= 0.0 {
        return vec![0.0; s.len()];
    }
    if shifted_sum(s, 0.0) <= delta {
        return s.iter().map(|&x| clip01(x)).collect();
    }
    let mut lo = 0.0;
    let mut hi = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut mu = 0.5 * (lo + hi);
    for _ in 0..200 {
        mu = 0.5 * (lo + hi);
        let total = shifted_sum(s, mu);
        if (total - delta).abs() <= 1e-10 || hi - lo <= 1e-15 {
            break;
        }
        if total > delta {
            lo = mu;
        } else {
            hi = mu;
        }
    }
    // solve exactly on the active set found by bisection
    let (mut free_sum, mut free, mut upper) = (0.0, 0usize, 0usize);
    for &x in s {
        let y = x - mu;
        if y >= 1.0 {
            upper += 1;
        } else if y > 0.0 {
            free += 1;
            free_sum += x;
        }
    }
    if free > 0 {
        let exact = (free_sum + upper as f64 - delta) / free as f64;
        let consistent = s.iter().all(|&x| {
            let (a, b) = (x - mu, x - exact);
            (a >= 1.0) == (b >= 1.0) && (a > 0.0) == (b > 0.0)
        });
        if consistent && exact > 0.0 {
            mu = exact;
        }
    }
    s.iter().map(|&x| clip01(x - mu)).collect()
}

/// Objective `Σ S ⊙ C` of the relaxed knapsack with `P = clip(S) ⊙ C`.
pub fn knapsack_value(s: &[f64], p: &[f64]) -> f64 {
    s.iter()
        .zip(p)
        .filter(|(&x, _)| x > 0.0)
        .map(|(&x, &y)| x / clip01(x) * y)
        .sum()
}

fn descending_order(s: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..s.len()).filter(|&i| s[i] > 0.0).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    order
}

#[derive(Clone)]
struct Remainders {
    global: f64,
    local: Option<Vec<f64>>,
}

impl Remainders {
    fn cap(&self, u: usize, v: usize) -> f64 {
        match &self.local {
            Some(l) => self.global.min(l[u]).min(l[v]),
            None => self.global,
        }
    }

    fn take(&mut self, u: usize, v: usize, p: f64) {
        self.global -= p;
        if let Some(l) = &mut self.local {
            l[u] -= p;
            l[v] -= p;
        }
    }
}

fn greedy_partial(slots: &[(usize, usize)], s: &[f64], order: &[usize], mut rem: Remainders) -> Vec<f64> {
    let mut p = vec![0.0; s.len()];
    for &i in order {
        if rem.global <= 0.0 {
            break;
        }
        let (u, v) = slots[i];
        let x = clip01(s[i]).min(rem.cap(u, v)).max(0.0);
        if x > 0.0 {
            p[i] = x;
            rem.take(u, v, x);
        }
    }
    p
}

fn greedy_whole(slots: &[(usize, usize)], s: &[f64], order: &[usize], mut rem: Remainders) -> Vec<f64> {
    let mut p = vec![0.0; s.len()];
    for &i in order {
        let x = clip01(s[i]);
        if rem.global - x < 0.0 {
            break;
        }
        let (u, v) = slots[i];
        if rem.cap(u, v) >= x {
            p[i] = x;
            rem.take(u, v, x);
        }
    }
    p
}

/// Greedy relaxed multi-constraint knapsack: keeps the larger-valued of
/// the partial-assignment and whole-item greedy passes over one sort.
pub fn project_local_global(slots: &[(usize, usize)], s: &[f64], budget: &Budget) -> Vec<f64> {
    let local: Option<Vec<f64>> = budget.local.as_ref().map(|l| l.iter().map(|&x| x as f64).collect());
    project_knapsack(slots, s, budget.global as f64, local.as_deref())
}

/// [`project_local_global`] with real-valued budgets.
pub fn project_knapsack(slots: &[(usize, usize)], s: &[f64], global: f64, local: Option<&[f64]>) -> Vec<f64> {
    assert_eq!(slots.len(), s.len());
    let rem = Remainders { global, local: local.map(<[f64]>::to_vec) };
    let order = descending_order(s);
    let partial = greedy_partial(slots, s, &order, rem.clone());
    if local.is_none() {
        return partial;
    }
    let whole = greedy_whole(slots, s, &order, rem);
    if knapsack_value(s, &whole) > knapsack_value(s, &partial) {
        whole
    } else {
        partial
    }
}

/// Unit-weight greedy: a slot is taken iff every budget it touches has room.
pub fn discretize_knapsack(slots: &[(usize, usize)], s: &[f64], budget: &Budget) -> Result<EdgeFlips> {
    let mut global = budget.global;
    let mut local = budget.local.clone();
    let mut chosen = Vec::new();
    for i in descending_order(s) {
        if global == 0 {
            break;
        }
        let (u, v) = slots[i];
        if let Some(l) = &mut local {
            if l[u] == 0 || l[v] == 0 {
                continue;
            }
            l[u] -= 1;
            l[v] -= 1;
        }
        global -= 1;
        chosen.push((u, v));
    }
    EdgeFlips::new(chosen)
}

/// Bernoulli rounding: draws with more than Δ flips are rejected, the
/// accepted draw with the highest `loss` wins (first on ties). Falls back
/// to the top-Δ slots when no draw is accepted.
pub fn discretize_sample(
    slots: &[(usize, usize)],
    p: &[f64],
    delta: usize,
    tries: usize,
    rng: &mut Rng,
    mut loss: impl FnMut(&EdgeFlips) -> Result<f64>,
) -> Result<EdgeFlips> {
    let mut best: Option<(f64, EdgeFlips)> = None;
    for _ in 0..tries {
        let draw: Vec<(usize, usize)> = slots
            .iter()
            .zip(p)
            .filter(|(_, &x)| rng.random::<f64>() < x)
            .map(|(&s, _)| s)
            .collect();
        if draw.len() > delta {
            continue;
        }
        let flips = EdgeFlips::new(draw)?;
        let l = loss(&flips)?;
        if best.as_ref().is_none_or(|(b, _)| l > *b) {
            best = Some((l, flips));
        }
    }
    match best {
        Some((_, f)) => Ok(f),
        None => discretize_knapsack(slots, p, &Budget::global_only(delta)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Prbcd,
    Lrbcd,
    Pgd,
    Fgsm,
    Dice,
}

impl AttackKind {
    pub fn uses_local(self) -> bool {
        !matches!(self, AttackKind::Prbcd | AttackKind::Pgd)
    }
}

fn default_epsilon() -> f64 {
    0.1
}
fn default_block() -> usize {
    10_000
}
fn default_epochs() -> usize {
    100
}
fn default_finetune() -> usize {
    25
}
fn default_lr_base() -> f64 {
    100.0
}
fn default_one() -> f64 {
    1.0
}
fn default_tries() -> usize {
    20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub local_rule: LocalRule,
    #[serde(default = "default_block")]
    pub block_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_finetune")]
    pub finetune: usize,
    #[serde(default = "default_lr_base")]
    pub lr_base: f64,
    #[serde(default = "default_one")]
    pub lr_multiplier: f64,
    #[serde(default = "default_tries")]
    pub sample_tries: usize,
    #[serde(default)]
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(kind: AttackKind, epsilon: f64) -> Self {
        AttackConfig {
            kind,
            epsilon,
            local_rule: LocalRule::default(),
            block_size: default_block(),
            epochs: default_epochs(),
            finetune: default_finetune(),
            lr_base: default_lr_base(),
            lr_multiplier: 1.0,
            sample_tries: default_tries(),
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_rule(mut self, rule: LocalRule) -> Self {
        self.local_rule = rule;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!("epsilon must be non-negative, got {}", self.epsilon)));
        }
        if self.block_size == 0 || self.sample_tries == 0 {
            return Err(Error::Config("block_size and sample_tries must be positive".into()));
        }
        if !(self.lr_base > 0.0 && self.lr_multiplier > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    /// Budget family this attack works under.
    pub fn budget(&self, graph: &Graph, targets: &[usize]) -> Result<Budget> {
        let rule = if self.kind.uses_local() { self.local_rule } else { LocalRule::Unlimited };
        compute_budgets(graph, targets, self.epsilon, rule)
    }
}

/// Number of upper-triangular slots of an `n`-node graph.
pub fn num_slots(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Row-major upper-triangular slot with linear index `k`.
pub fn slot_from_index(n: usize, k: usize) -> (usize, usize) {
    // row u starts at u·n − u(u+1)/2
    let start = |u: usize| u * n - u * (u + 1) / 2;
    let nf = n as f64;
    let kf = k as f64;
    let guess = (nf - 0.5 - ((nf - 0.5) * (nf - 0.5) - 2.0 * kf).max(0.0).sqrt()).floor();
    let mut u = (guess.max(0.0) as usize).min(n.saturating_sub(2));
    while u > 0 && start(u) > k {
        u -= 1;
    }
    while u + 2 < n && start(u + 1) <= k {
        u += 1;
    }
    (u, u + 1 + k - start(u))
}

pub fn slot_index(n: usize, (u, v): (usize, usize)) -> usize {
    u * n - u * (u + 1) / 2 + (v - u - 1)
}

/// Random slot block for the coordinate-descent attacks.
#[derive(Clone, Debug)]
struct Block {
    n: usize,
    slots: Vec<(usize, usize)>,
    values: Vec<f64>,
    present: HashSet<usize>,
}

impl Block {
    fn full(n: usize) -> Self {
        let slots: Vec<_> = (0..num_slots(n)).map(|k| slot_from_index(n, k)).collect();
        let present = (0..slots.len()).collect();
        Block { n, values: vec![0.0; slots.len()], slots, present }
    }

    fn sample(n: usize, size: usize, rng: &mut Rng) -> Self {
        let mut block = Block { n, slots: Vec::new(), values: Vec::new(), present: HashSet::new() };
        block.refill(size, rng);
        block
    }

    /// Adds up to `count` fresh slots, uniformly among those not present.
    fn refill(&mut self, count: usize, rng: &mut Rng) {
        let total = num_slots(self.n);
        let count = count.min(total - self.present.len());
        if count == 0 {
            return;
        }
        if 2 * (self.present.len() + count) <= total {
            let mut added = 0;
            while added < count {
                let k = rng.random_range(0..total);
                if self.present.insert(k) {
                    self.slots.push(slot_from_index(self.n, k));
                    self.values.push(0.0);
                    added += 1;
                }
            }
        } else {
            let free: Vec<usize> = (0..total).filter(|k| !self.present.contains(k)).collect();
            for i in index::sample(rng, free.len(), count) {
                let k = free[i];
                self.present.insert(k);
                self.slots.push(slot_from_index(self.n, k));
                self.values.push(0.0);
            }
        }
    }

    /// Drops every zero slot, plus the lowest-valued ones until at least
    /// half the block is dropped, then refills to `size`.
    fn resample(&mut self, size: usize, rng: &mut Rng) {
        let half = self.slots.len().div_ceil(2);
        let zeros = self.values.iter().filter(|&&v| v == 0.0).count();
        let keep: Vec<usize> = if zeros >= half {
            (0..self.slots.len()).filter(|&i| self.values[i] > 0.0).collect()
        } else {
            let mut order: Vec<usize> = (0..self.slots.len()).collect();
            order.sort_by(|&a, &b| self.values[b].total_cmp(&self.values[a]));
            let mut kept = order[..self.slots.len() - half].to_vec();
            kept.sort_unstable();
            kept
        };
        let slots: Vec<_> = keep.iter().map(|&i| self.slots[i]).collect();
        let values: Vec<_> = keep.iter().map(|&i| self.values[i]).collect();
        self.present = slots.iter().map(|&s| slot_index(self.n, s)).collect();
        self.slots = slots;
        self.values = values;
        self.refill(size - self.slots.len(), rng);
    }

    fn perturbation(&self) -> Result<RelaxedPerturbation> {
        RelaxedPerturbation::new(self.n, self.slots.clone(), self.values.clone())
    }
}

/// Inputs shared by every attack.
pub struct AttackTarget<'a> {
    pub graph: &'a Graph,
    pub targets: &'a [usize],
    pub labels: &'a [usize],
}

impl AttackTarget<'_> {
    fn loss_of(&self, model: &dyn Predictor, flips: &EdgeFlips) -> Result<f64> {
        let g = self.graph.apply_flips(flips)?;
        loss_value(&model.logits(&g)?, LossKind::TanhMargin, self.targets, self.labels)
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Projection {
    Global,
    Local,
}

struct BcdSchedule {
    epochs: usize,
    finetune: usize,
    resample: bool,
    lr: Box<dyn Fn(usize, usize) -> f64>,
}

fn run_bcd(
    model: &dyn Predictor,
    at: &AttackTarget,
    budget: &Budget,
    mut block: Block,
    size: usize,
    schedule: BcdSchedule,
    projection: Projection,
    rng: &mut Rng,
) -> Result<Block> {
    let project = |block: &Block, s: &[f64]| match projection {
        Projection::Global => project_global(s, budget.global as f64),
        Projection::Local => project_local_global(&block.slots, s, budget),
    };
    let mut best: Option<(f64, Block)> = None;
    let total = schedule.epochs + schedule.finetune;
    for t in 0..total {
        if t == schedule.epochs {
            if let Some((_, b)) = &best {
                block = b.clone();
            }
        }
        let (loss, grad) =
            model.attack_gradient(at.graph, &block.perturbation()?, at.targets, at.labels, LossKind::TanhMargin)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite attack gradient".into()));
        }
        if best.as_ref().is_none_or(|(b, _)| loss > *b) {
            best = Some((loss, block.clone()));
        }
        let alpha = (schedule.lr)(t, schedule.epochs);
        let s: Vec<f64> = block.values.iter().zip(&grad).map(|(p, g)| p + alpha * g).collect();
        block.values = project(&block, &s);
        if schedule.resample && t + 1 < schedule.epochs {
            block.resample(size, rng);
        }
    }
    let (loss, _) =
        model.attack_gradient(at.graph, &block.perturbation()?, at.targets, at.labels, LossKind::TanhMargin)?;
    match best {
        Some((b, kept)) if b > loss => Ok(kept),
        _ => Ok(block),
    }
}

const PGD_MAX_NODES: usize = 3000;

/// Runs the configured attack. The result is checked against `budget`.
pub fn attack(
    model: &dyn Predictor,
    at: &AttackTarget,
    budget: &Budget,
    config: &AttackConfig,
) -> Result<EdgeFlips> {
    config.validate()?;
    if at.targets.len() != at.labels.len() {
        return Err(Error::Dimension("targets and labels differ in length".into()));
    }
    let n = at.graph.num_nodes();
    if let Some(local) = &budget.local {
        if local.len() != n {
            return Err(Error::Dimension(format!("{} local budgets for {n} nodes", local.len())));
        }
    }
    if budget.global == 0 || n < 2 {
        return Ok(EdgeFlips::empty());
    }
    let mut rng = rng::stream(config.seed, "attack");
    let flips = match config.kind {
        AttackKind::Prbcd | AttackKind::Lrbcd => {
            if config.block_size < budget.global {
                return Err(Error::Config(format!(
                    "block size {} is below the budget {}",
                    config.block_size, budget.global
                )));
            }
            let size = config.block_size.min(num_slots(n));
            let scale = config.lr_base * config.lr_multiplier * budget.global as f64 / (size as f64).sqrt();
            let schedule = BcdSchedule {
                epochs: config.epochs,
                finetune: config.finetune,
                resample: true,
                lr: Box::new(move |t, epochs| {
                    if t < epochs {
                        scale
                    } else {
                        scale / ((t - epochs + 1) as f64).sqrt()
                    }
                }),
            };
            let block = Block::sample(n, size, &mut rng);
            if config.kind == AttackKind::Prbcd {
                let block = run_bcd(model, at, budget, block, size, schedule, Projection::Global, &mut rng)?;
                discretize_sample(&block.slots, &block.values, budget.global, config.sample_tries, &mut rng, |f| {
                    at.loss_of(model, f)
                })?
            } else {
                let block = run_bcd(model, at, budget, block, size, schedule, Projection::Local, &mut rng)?;
                discretize_knapsack(&block.slots, &block.values, budget)?
            }
        }
        AttackKind::Pgd => {
            if n > PGD_MAX_NODES {
                return Err(Error::Capacity(format!(
                    "PGD holds all slots and supports at most {PGD_MAX_NODES} nodes; use prbcd"
                )));
            }
            let delta = budget.global as f64;
            let schedule = BcdSchedule {
                epochs: config.epochs,
                finetune: 0,
                resample: false,
                lr: Box::new(move |t, _| 0.1 * delta / ((t + 1) as f64).sqrt()),
            };
            let block = run_bcd(model, at, budget, Block::full(n), 0, schedule, Projection::Global, &mut rng)?;
            discretize_sample(&block.slots, &block.values, budget.global, config.sample_tries, &mut rng, |f| {
                at.loss_of(model, f)
            })?
        }
        AttackKind::Fgsm => attack_fgsm_greedy(model, at, budget, config.block_size, &mut rng)?,
        AttackKind::Dice => attack_dice(at.graph, at.targets, budget, &mut rng)?,
    };
    budget.check(&flips, n)?;
    Ok(flips)
}

/// Dense FGSM up to this many slots, a random block of the configured
/// size beyond.
const FGSM_DENSE_SLOTS: usize = 200_000;

/// Flips one slot per round: the feasible unflipped slot with the largest
/// first-order gain `∇·(1 − 2p)`.
pub fn attack_fgsm_greedy(
    model: &dyn Predictor,
    at: &AttackTarget,
    budget: &Budget,
    block_size: usize,
    rng: &mut Rng,
) -> Result<EdgeFlips> {
    let n = at.graph.num_nodes();
    let total = num_slots(n);
    let mut local = budget.local.clone();
    let mut flipped: Vec<(usize, usize)> = Vec::new();
    let mut taken: HashSet<usize> = HashSet::new();
    for _ in 0..budget.global {
        let mut block = if total <= FGSM_DENSE_SLOTS {
            Block::full(n)
        } else {
            let mut b = Block::sample(n, block_size.min(total), rng);
            for &s in &flipped {
                if b.present.insert(slot_index(n, s)) {
                    b.slots.push(s);
                    b.values.push(0.0);
                }
            }
            b
        };
        for (s, v) in block.slots.iter().zip(block.values.iter_mut()) {
            if taken.contains(&slot_index(n, *s)) {
                *v = 1.0;
            }
        }
        let (_, grad) =
            model.attack_gradient(at.graph, &block.perturbation()?, at.targets, at.labels, LossKind::TanhMargin)?;
        let mut best: Option<(f64, usize)> = None;
        for (i, &(u, v)) in block.slots.iter().enumerate() {
            if block.values[i] > 0.0 {
                continue;
            }
            if let Some(l) = &local {
                if l[u] == 0 || l[v] == 0 {
                    continue;
                }
            }
            let gain = grad[i];
            if best.is_none_or(|(b, _)| gain > b) {
                best = Some((gain, i));
            }
        }
        let Some((_, i)) = best else { break };
        let (u, v) = block.slots[i];
        if let Some(l) = &mut local {
            l[u] -= 1;
            l[v] -= 1;
        }
        taken.insert(slot_index(n, (u, v)));
        flipped.push((u, v));
    }
    EdgeFlips::new(flipped)
}

const DICE_TRIES: usize = 1000;

/// Random heuristic: each flip deletes a same-class edge or inserts a
/// cross-class edge, always touching a target and using known labels only.
pub fn attack_dice(graph: &Graph, targets: &[usize], budget: &Budget, rng: &mut Rng) -> Result<EdgeFlips> {
    let n = graph.num_nodes();
    let labels = graph.labels();
    let is_target = {
        let mut t = vec![false; n];
        for &u in targets {
            t[u] = true;
        }
        t
    };
    let mut local = budget.local.clone();
    let room = |l: &Option<Vec<usize>>, u: usize, v: usize| l.as_ref().is_none_or(|l| l[u] > 0 && l[v] > 0);
    let mut deletions: Vec<(usize, usize)> = graph
        .edges()
        .iter()
        .copied()
        .filter(|&(u, v)| {
            (is_target[u] || is_target[v]) && labels[u].is_some() && labels[u] == labels[v]
        })
        .collect();
    let labelled_targets: Vec<usize> = targets.iter().copied().filter(|&u| labels[u].is_some()).collect();
    let others: Vec<usize> = (0..n).filter(|&u| labels[u].is_some()).collect();
    let mut chosen: HashSet<(usize, usize)> = HashSet::new();
    let mut flips = Vec::new();
    let mut insert_open = !labelled_targets.is_empty();
    while flips.len() < budget.global {
        let delete = rng.random_bool(0.5);
        let mut found = None;
        if delete || !insert_open {
            while !deletions.is_empty() && found.is_none() {
                let i = rng.random_range(0..deletions.len());
                let (u, v) = deletions.swap_remove(i);
                if room(&local, u, v) {
                    found = Some((u, v));
                }
            }
        }
        if found.is_none() && insert_open {
            for _ in 0..DICE_TRIES {
                let u = labelled_targets[rng.random_range(0..labelled_targets.len())];
                let v = others[rng.random_range(0..others.len())];
                let s = (u.min(v), u.max(v));
                if u != v
                    && labels[u] != labels[v]
                    && !graph.has_edge(s.0, s.1)
                    && !chosen.contains(&s)
                    && room(&local, u, v)
                {
                    found = Some(s);
                    break;
                }
            }
            if found.is_none() {
                insert_open = false;
            }
        }
        let Some((u, v)) = found else {
            if deletions.is_empty() && !insert_open {
                log::warn!("DICE exhausted its candidates after {} of {} flips", flips.len(), budget.global);
                break;
            }
            continue;
        };
        if let Some(l) = &mut local {
            l[u] -= 1;
            l[v] -= 1;
        }
        chosen.insert((u, v));
        flips.push((u, v));
    }
    EdgeFlips::new(flips)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub attack: AttackKind,
    pub epsilon: f64,
    pub delta: usize,
    pub local_rule: LocalRule,
    pub flips: usize,
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slot_indexing_round_trips() {
        for n in 2..40 {
            for k in 0..num_slots(n) {
                let (u, v) = slot_from_index(n, k);
                assert!(u < v && v < n);
                assert_eq!(slot_index(n, (u, v)), k);
            }
        }
    }

    #[test]
    fn budgets() {
        // path 0-1-2-3-4-5: degrees 1,2,2,2,2,1
        let g = Graph::new(
            6,
            [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)],
            crate::Matrix::zeros(6, 1),
            vec![None; 6],
            2,
        )
        .unwrap();
        let b = compute_budgets(&g, &[0, 1, 2, 3, 4, 5], 0.5, LocalRule::HalfDegree).unwrap();
        // 0.5·10/2 = 2.5 → 2 (ties to even)
        assert_eq!(b.global, 2);
        assert_eq!(b.local, Some(vec![0, 1, 1, 1, 1, 0]));
        assert_eq!(compute_budgets(&g, &[1, 2], 0.75, LocalRule::Unlimited).unwrap().global, 2);
        assert_eq!(compute_budgets(&g, &[1], 0.0, LocalRule::QuarterDegree).unwrap().global, 0);
        assert!(compute_budgets(&g, &[1], -0.1, LocalRule::Unlimited).is_err());
        assert!(compute_budgets(&g, &[], 0.1, LocalRule::Unlimited).is_err());
    }

    #[test]
    fn global_projection_examples() {
        assert_eq!(project_global(&[0.3, 0.2], 2.0), vec![0.3, 0.2]);
        assert_eq!(project_global(&[-0.5, 2.0], 1.0), vec![0.0, 1.0]);
        let p = project_global(&[0.9, 0.8, 0.5], 1.0);
        for (a, b) in p.iter().zip([0.5, 0.4, 0.1]) {
            assert!((a - b).abs() < 1e-12, "{p:?}");
        }
        assert_eq!(project_global(&[0.9, 0.4], 0.0), vec![0.0, 0.0]);
    }

    #[test]
    fn local_projection_examples() {
        let distinct = [(0, 1), (2, 3), (4, 5)];
        let p = project_knapsack(&distinct, &[0.9, 0.8, 0.5], 1.5, None);
        assert!(p[0] == 0.9 && (p[1] - 0.6).abs() < 1e-12 && p[2] == 0.0, "{p:?}");

        let tri = [(0, 1), (0, 2), (1, 2)];
        let b = Budget { global: 2, local: Some(vec![1, 1, 1]) };
        let p = project_local_global(&tri, &[0.9, 0.8, 0.7], &b);
        for (a, e) in p.iter().zip([0.9, 0.1, 0.1]) {
            assert!((a - e).abs() < 1e-12, "{p:?}");
        }
        assert_eq!(project_local_global(&tri, &[-0.1, 0.0, -3.0], &b), vec![0.0; 3]);
    }

    #[test]
    fn whole_item_pass_wins_when_partial_blocks_a_hub() {
        let slots = [(0, 1), (0, 2), (0, 3), (2, 5), (2, 6)];
        let s = [0.6, 0.55, 0.4, 0.5, 0.5];
        let b = Budget { global: 10, local: Some(vec![1; 7]) };
        let p = project_local_global(&slots, &s, &b);
        assert_eq!(p, vec![0.6, 0.0, 0.4, 0.5, 0.5]);
    }

    #[test]
    fn knapsack_discretization_examples() {
        let tri = [(0, 1), (0, 2), (1, 2)];
        let b = Budget { global: 2, local: Some(vec![1, 1, 1]) };
        assert_eq!(discretize_knapsack(&tri, &[0.9, 0.8, 0.7], &b).unwrap().slots(), &[(0, 1)]);
        let b0 = Budget::global_only(0);
        assert!(discretize_knapsack(&tri, &[0.9, 0.8, 0.7], &b0).unwrap().is_empty());
        let distinct = [(0, 1), (2, 3), (4, 5)];
        let top = discretize_knapsack(&distinct, &[0.2, 0.9, 0.5], &Budget::global_only(2)).unwrap();
        assert_eq!(top.slots(), &[(2, 3), (4, 5)]);
    }

    #[test]
    fn sampling_discretization() {
        let slots = [(0, 1), (0, 2), (1, 2), (2, 3)];
        let mut rng = rng::stream(0, "t");
        let binary = discretize_sample(&slots, &[1.0, 0.0, 1.0, 0.0], 2, 20, &mut rng, |_| Ok(0.0)).unwrap();
        assert_eq!(binary.slots(), &[(0, 1), (1, 2)]);
        for _ in 0..50 {
            let f = discretize_sample(&slots, &[0.5; 4], 2, 20, &mut rng, |f| Ok(f.len() as f64)).unwrap();
            assert!(f.len() <= 2);
        }
        // budget 0 with certain draws: nothing is accepted, fall back
        let f = discretize_sample(&slots, &[1.0; 4], 1, 5, &mut rng, |_| Ok(0.0)).unwrap();
        assert_eq!(f.len(), 1);
    }

    #[test]
    fn resampling_refreshes_half_the_block() {
        let mut rng = rng::stream(1, "t");
        let mut block = Block::sample(50, 100, &mut rng);
        for (i, v) in block.values.iter_mut().enumerate() {
            *v = (i + 1) as f64 / 200.0;
        }
        let before: HashSet<_> = block.slots.iter().copied().collect();
        block.resample(100, &mut rng);
        assert_eq!(block.slots.len(), 100);
        assert_eq!(block.present.len(), 100);
        let kept = block.slots.iter().filter(|s| before.contains(s)).count();
        assert!((50..=100).contains(&kept));
        assert_eq!(block.values.iter().filter(|&&v| v > 0.0).count(), 50);
    }
}
