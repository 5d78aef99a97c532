use rand::seq::SliceRandom;
use rand::Rng as _;
use robustgnn::attack::{
    attack, compute_budgets, discretize_sample, AttackConfig, AttackKind, AttackTarget, Budget, LocalRule,
};
use robustgnn::data::{make_split, sample_csbm, CsbmParams};
use robustgnn::model::{accuracy, Basis, DiffusionModel, LossKind, Mode, ModelSpec, Predictor};
use robustgnn::rng::{self, Rng};
use robustgnn::train::accuracy_under;
use robustgnn::{EdgeFlips, Error, Graph, Matrix, RelaxedPerturbation};

const KINDS: [AttackKind; 5] = [AttackKind::Prbcd, AttackKind::Lrbcd, AttackKind::Pgd, AttackKind::Fgsm, AttackKind::Dice];

fn random_graph(rng: &mut Rng, n: usize, density: f64) -> Graph {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random_bool(density) {
                edges.push((u, v));
            }
        }
    }
    let x = Matrix::from_vec(n, 3, (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let y = (0..n).map(|_| Some(rng.random_range(0..2))).collect();
    Graph::new(n, edges, x, y, 2).unwrap()
}

fn csbm() -> Graph {
    sample_csbm(&CsbmParams::heterophilic(300, 7).with_degree_of(1000)).unwrap()
}

fn quick(kind: AttackKind, epsilon: f64) -> AttackConfig {
    AttackConfig { epochs: 20, finetune: 5, ..AttackConfig::new(kind, epsilon) }
}

#[test]
fn budget_examples() {
    // two hubs of degree 20 each
    let edges: Vec<(usize, usize)> = (1..=20).flat_map(|v| [(0, v), (v, 21)]).collect();
    let g = Graph::new(22, edges, Matrix::identity(22), vec![Some(0); 22], 1).unwrap();
    let b = compute_budgets(&g, &[0, 21], 0.1, LocalRule::Unlimited).unwrap();
    assert_eq!(b, Budget { global: 2, local: None });
    // 0.1 · 50 / 2 = 2.5 rounds to even
    let five: Vec<(usize, usize)> = (1..=5).map(|v| (0, v)).collect();
    let star = Graph::new(6, five, Matrix::identity(6), vec![Some(0); 6], 1).unwrap();
    assert_eq!(compute_budgets(&star, &[0; 10], 0.1, LocalRule::HalfDegree).unwrap().global, 2);
    assert_eq!(compute_budgets(&star, &[0; 6], 0.1, LocalRule::HalfDegree).unwrap().global, 2);
    let local = compute_budgets(&star, &[0], 1.0, LocalRule::HalfDegree).unwrap().local.unwrap();
    assert_eq!(local, vec![2, 0, 0, 0, 0, 0]);
    let quarter = compute_budgets(&star, &[0], 1.0, LocalRule::QuarterDegree).unwrap().local.unwrap();
    assert_eq!(quarter[0], 1);
    assert!(matches!(compute_budgets(&star, &[0], -0.1, LocalRule::HalfDegree), Err(Error::Parameter(_))));
    assert!(matches!(compute_budgets(&star, &[], 0.1, LocalRule::HalfDegree), Err(Error::Parameter(_))));
}

#[test]
fn zero_budget_gives_empty_perturbations() {
    let g = csbm();
    let model = DiffusionModel::init(&ModelSpec::new(Basis::Gcn), g.feature_dim(), 2, 0).unwrap();
    let targets: Vec<usize> = (0..30).collect();
    let labels = g.known_labels(&targets).unwrap();
    let at = AttackTarget { graph: &g, targets: &targets, labels: &labels };
    for kind in KINDS {
        let config = quick(kind, 0.0);
        let budget = config.budget(&g, &targets).unwrap();
        assert_eq!(budget.global, 0);
        assert!(attack(&model, &at, &budget, &config).unwrap().is_empty(), "{kind:?}");
    }
}

#[test]
fn graph_independent_model_keeps_its_accuracy() {
    let g = csbm();
    let model = DiffusionModel::init(&ModelSpec::new(Basis::Mlp), g.feature_dim(), 2, 1).unwrap();
    let targets: Vec<usize> = (0..60).collect();
    let labels = g.known_labels(&targets).unwrap();
    let at = AttackTarget { graph: &g, targets: &targets, labels: &labels };
    let clean = accuracy(&model.predict(&g).unwrap(), &targets, &labels);
    for kind in KINDS {
        let config = quick(kind, 0.5);
        let budget = config.budget(&g, &targets).unwrap();
        let flips = attack(&model, &at, &budget, &config).unwrap();
        assert_eq!(accuracy_under(&model, &g, &flips, &targets, &labels).unwrap(), clean, "{kind:?}");
    }
}

#[test]
fn zero_local_budgets_block_lrbcd() {
    let g = csbm();
    let model = DiffusionModel::init(&ModelSpec::new(Basis::Gcn), g.feature_dim(), 2, 2).unwrap();
    let targets: Vec<usize> = (0..30).collect();
    let labels = g.known_labels(&targets).unwrap();
    let at = AttackTarget { graph: &g, targets: &targets, labels: &labels };
    let budget = Budget { global: 25, local: Some(vec![0; g.num_nodes()]) };
    for kind in [AttackKind::Lrbcd, AttackKind::Fgsm, AttackKind::Dice] {
        assert!(attack(&model, &at, &budget, &quick(kind, 0.5)).unwrap().is_empty(), "{kind:?}");
    }
}

#[test]
fn lrbcd_outputs_are_feasible_on_fuzzed_instances() {
    let mut rng = rng::stream(11, "fuzz");
    for trial in 0..1000u64 {
        let n = rng.random_range(4..=14);
        let density = rng.random_range(0.1..0.6);
        let g = random_graph(&mut rng, n, density);
        let basis = [Basis::Gcn, Basis::Appnp, Basis::Monomial, Basis::Chebyshev][trial as usize % 4];
        let model = DiffusionModel::init(&ModelSpec::new(basis).with_k(3), 3, 2, trial).unwrap();
        let targets: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.5)).collect();
        if targets.is_empty() {
            continue;
        }
        let labels = g.known_labels(&targets).unwrap();
        let rule = [LocalRule::HalfDegree, LocalRule::QuarterDegree][trial as usize % 2];
        let config = AttackConfig {
            epochs: 5,
            finetune: 2,
            block_size: 200,
            ..AttackConfig::new(AttackKind::Lrbcd, rng.random_range(0.0..2.0)).with_rule(rule).with_seed(trial)
        };
        let budget = config.budget(&g, &targets).unwrap();
        let at = AttackTarget { graph: &g, targets: &targets, labels: &labels };
        let flips = attack(&model, &at, &budget, &config).unwrap();
        assert!(flips.len() <= budget.global);
        let degrees = g.degrees();
        let divisor = if rule == LocalRule::HalfDegree { 2 } else { 4 };
        for (u, c) in flips.incident_counts(n).into_iter().enumerate() {
            assert!(c <= degrees[u] / divisor, "trial {trial}: node {u} has {c} flips");
        }
    }
}

fn loss_with(model: &DiffusionModel, g: &Graph, p: Option<&RelaxedPerturbation>, targets: &[usize], labels: &[usize]) -> f64 {
    let mut pass = model.forward(g, p, Mode::Eval).unwrap();
    let l = pass.loss(LossKind::TanhMargin, targets, labels).unwrap();
    pass.value(l)
}

#[test]
fn fgsm_flips_the_slot_with_the_largest_gain() {
    let x = Matrix::from_rows(&[
        vec![1.0, 0.2],
        vec![0.8, -0.1],
        vec![-0.3, 0.9],
        vec![-1.0, 0.4],
        vec![0.1, -0.7],
    ])
    .unwrap();
    let y = [0, 0, 1, 1, 0].map(Some).to_vec();
    let g = Graph::new(5, vec![(0, 1), (1, 2), (2, 3), (3, 4)], x, y, 2).unwrap();
    let model = DiffusionModel::init(&ModelSpec::new(Basis::Gcn).with_hidden(6), 2, 2, 3).unwrap();
    let targets = vec![0, 1, 2, 3, 4];
    let labels = g.known_labels(&targets).unwrap();

    let h = 1e-6;
    let base = loss_with(&model, &g, None, &targets, &labels);
    let slots: Vec<(usize, usize)> = (0..5).flat_map(|u| (u + 1..5).map(move |v| (u, v))).collect();
    let gains: Vec<f64> = slots
        .iter()
        .map(|&s| {
            let p = RelaxedPerturbation::new(5, vec![s], vec![h]).unwrap();
            (loss_with(&model, &g, Some(&p), &targets, &labels) - base) / h
        })
        .collect();
    let best = (0..slots.len()).max_by(|&a, &b| gains[a].total_cmp(&gains[b])).unwrap();
    let mut sorted = gains.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    assert!(sorted[0] - sorted[1] > 1e-4, "gains too close to tell apart: {sorted:?}");

    let at = AttackTarget { graph: &g, targets: &targets, labels: &labels };
    let flips = attack(&model, &at, &Budget::global_only(1), &AttackConfig::new(AttackKind::Fgsm, 0.0)).unwrap();
    assert_eq!(flips.slots(), &[slots[best]]);
}

#[test]
fn dice_deletes_inside_and_connects_across_classes() {
    let g = csbm();
    let mut rng = rng::stream(5, "targets");
    let mut targets: Vec<usize> = (0..g.num_nodes()).collect();
    targets.shuffle(&mut rng);
    targets.truncate(40);
    let labels = g.known_labels(&targets).unwrap();
    let model = DiffusionModel::init(&ModelSpec::new(Basis::Gcn), g.feature_dim(), 2, 0).unwrap();
    let at = AttackTarget { graph: &g, targets: &targets, labels: &labels };
    for (seed, rule) in [(0, LocalRule::Unlimited), (1, LocalRule::HalfDegree)] {
        let config = AttackConfig::new(AttackKind::Dice, 1.0).with_rule(rule).with_seed(seed);
        let budget = config.budget(&g, &targets).unwrap();
        let flips = attack(&model, &at, &budget, &config).unwrap();
        assert!(!flips.is_empty());
        let y = g.labels();
        for &(u, v) in flips.slots() {
            assert!(targets.contains(&u) || targets.contains(&v));
            if g.has_edge(u, v) {
                assert_eq!(y[u], y[v], "deleted a cross-class edge ({u}, {v})");
            } else {
                assert_ne!(y[u], y[v], "inserted a same-class edge ({u}, {v})");
            }
        }
        budget.check(&flips, g.num_nodes()).unwrap();
    }
}

#[test]
fn pgd_refuses_large_graphs() {
    let n = 3001;
    let g = Graph::new(n, vec![(0, 1)], Matrix::zeros(n, 1), vec![Some(0); n], 1).unwrap();
    let model = DiffusionModel::init(&ModelSpec::new(Basis::Gcn), 1, 1, 0).unwrap();
    let at = AttackTarget { graph: &g, targets: &[0], labels: &[0] };
    let err = attack(&model, &at, &Budget::global_only(1), &AttackConfig::new(AttackKind::Pgd, 1.0));
    assert!(matches!(err, Err(Error::Capacity(_))));
}

#[test]
fn block_smaller_than_budget_is_a_config_error() {
    let g = csbm();
    let model = DiffusionModel::init(&ModelSpec::new(Basis::Gcn), g.feature_dim(), 2, 0).unwrap();
    let targets: Vec<usize> = (0..30).collect();
    let labels = g.known_labels(&targets).unwrap();
    let at = AttackTarget { graph: &g, targets: &targets, labels: &labels };
    for kind in [AttackKind::Prbcd, AttackKind::Lrbcd] {
        let config = AttackConfig { block_size: 5, ..AttackConfig::new(kind, 1.0) };
        let err = attack(&model, &at, &Budget::global_only(10), &config);
        assert!(matches!(err, Err(Error::Config(_))), "{kind:?}");
    }
}

#[test]
fn attacks_are_deterministic_per_seed() {
    let g = csbm();
    let model = DiffusionModel::init(&ModelSpec::new(Basis::Monomial), g.feature_dim(), 2, 4).unwrap();
    let targets: Vec<usize> = (0..30).collect();
    let labels = g.known_labels(&targets).unwrap();
    let at = AttackTarget { graph: &g, targets: &targets, labels: &labels };
    for kind in KINDS {
        let config = quick(kind, 0.3).with_seed(9);
        let budget = config.budget(&g, &targets).unwrap();
        let a = attack(&model, &at, &budget, &config).unwrap();
        let b = attack(&model, &at, &budget, &config).unwrap();
        assert_eq!(a, b, "{kind:?}");
    }
}

#[test]
fn perturbation_files_round_trip() {
    let g = csbm();
    let flips = EdgeFlips::new([g.edges()[0], (0, g.num_nodes() - 1)]).unwrap();
    let text = flips.to_json(&g).unwrap();
    assert!(text.contains("\"del\"") || text.contains("\"add\""));
    assert_eq!(EdgeFlips::from_json(&text, &g).unwrap(), flips);
}

#[test]
fn sampling_keeps_binary_values_and_respects_the_budget() {
    let mut rng = rng::stream(0, "sample");
    let slots = vec![(0, 1), (0, 2), (1, 3), (2, 3)];
    let binary = vec![1.0, 0.0, 1.0, 0.0];
    let flips = discretize_sample(&slots, &binary, 2, 20, &mut rng, |_| Ok(0.0)).unwrap();
    assert_eq!(flips.slots(), &[(0, 1), (1, 3)]);

    let half = vec![0.5; 4];
    let mut accepted = 0;
    discretize_sample(&slots, &half, 2, 200, &mut rng, |f| {
        assert!(f.len() <= 2);
        accepted += 1;
        Ok(f.len() as f64)
    })
    .unwrap();
    assert!(accepted > 0);
}

#[test]
fn sampled_flip_counts_follow_the_bernoulli_mean() {
    let mut rng = rng::stream(1, "sample");
    let slots: Vec<(usize, usize)> = (1..=12).map(|v| (0, v)).collect();
    let p: Vec<f64> = (0..12).map(|i| 0.05 + 0.07 * i as f64).collect();
    let draws = 10_000;
    let mut total = 0usize;
    for _ in 0..draws {
        total += discretize_sample(&slots, &p, 12, 1, &mut rng, |_| Ok(0.0)).unwrap().len();
    }
    let mean = total as f64 / draws as f64;
    let expected: f64 = p.iter().sum();
    let sd = (p.iter().map(|x| x * (1.0 - x)).sum::<f64>() / draws as f64).sqrt();
    assert!((mean - expected).abs() <= 3.0 * sd, "mean {mean} vs {expected} (sd {sd})");
}

#[test]
fn memorized_models_refuse_other_node_sets() {
    let g = csbm();
    let split = make_split(&g, 20, 20, 0.1, true, 0).unwrap();
    let model = DiffusionModel::init(&ModelSpec::new(Basis::Gcn), g.feature_dim(), 2, 0).unwrap();
    let train = robustgnn::data::training_view(&g, &split).unwrap();
    let wrapped = robustgnn::train::memorize(&model, &train.graph).unwrap();
    assert!(wrapped.logits(&g).is_err());
    assert_eq!(wrapped.logits(&train.graph).unwrap(), model.predict_logits(&train.graph).unwrap());
}
