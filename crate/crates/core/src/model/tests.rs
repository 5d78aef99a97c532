use super::*;
use crate::graph::build_normalized;
use rand::seq::SliceRandom;

fn random_graph(rng: &mut Rng, n: usize, d: usize, c: usize) -> Graph {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random_bool(0.35) {
                edges.push((u, v));
            }
        }
    }
    let x = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let y = (0..n).map(|_| Some(rng.random_range(0..c))).collect();
    Graph::new(n, edges, x, y, c).unwrap()
}

fn random_perturbation(rng: &mut Rng, n: usize) -> RelaxedPerturbation {
    let mut all: Vec<(usize, usize)> = (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v))).collect();
    all.shuffle(rng);
    let k = (all.len() / 3).max(1);
    let slots = all[..k].to_vec();
    let values = (0..k).map(|_| rng.random_range(0.05..0.95)).collect();
    RelaxedPerturbation::new(n, slots, values).unwrap()
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-3)
}

fn eval_loss(model: &DiffusionModel, g: &Graph, p: Option<&RelaxedPerturbation>, kind: LossKind) -> f64 {
    let mut pass = model.forward(g, p, Mode::Eval).unwrap();
    let idx: Vec<usize> = (0..g.num_nodes()).collect();
    let labels = g.known_labels(&idx).unwrap();
    let l = pass.loss(kind, &idx, &labels).unwrap();
    pass.value(l)
}

const BASES: [Basis; 5] = [Basis::Mlp, Basis::Gcn, Basis::Appnp, Basis::Monomial, Basis::Chebyshev];

#[test]
fn parameter_gradients_match_finite_differences() {
    let mut rng = rng::stream(1, "test");
    for trial in 0..20 {
        let n = rng.random_range(3..=10);
        let (d, c) = (rng.random_range(1..=4), rng.random_range(2..=3));
        let g = random_graph(&mut rng, n, d, c);
        let basis = BASES[trial % BASES.len()];
        let spec = ModelSpec::new(basis).with_k(3).with_hidden(5).without_dropout();
        let mut model = DiffusionModel::init(&spec, d, c, trial as u64).unwrap();
        let kind = if trial % 2 == 0 { LossKind::CrossEntropy } else { LossKind::TanhMargin };
        let idx: Vec<usize> = (0..n).collect();
        let labels = g.known_labels(&idx).unwrap();
        let mut dummy = rng::stream(0, "unused");
        let mut pass = model.forward(&g, None, Mode::Train(&mut dummy)).unwrap();
        let l = pass.loss(kind, &idx, &labels).unwrap();
        let grads = pass.backward_params(l).unwrap();
        let flat: Vec<f64> = grads.slices().concat();
        let h = 1e-6;
        let mut offset = 0;
        let sizes: Vec<usize> = model.params_mut().iter().map(|(p, _)| p.len()).collect();
        for (group, size) in sizes.into_iter().enumerate() {
            for j in 0..size {
                let orig = model.params_mut()[group].0[j];
                model.params_mut()[group].0[j] = orig + h;
                let up = eval_loss(&model, &g, None, kind);
                model.params_mut()[group].0[j] = orig - h;
                let down = eval_loss(&model, &g, None, kind);
                model.params_mut()[group].0[j] = orig;
                let fd = (up - down) / (2.0 * h);
                let a = flat[offset + j];
                assert!(rel_err(a, fd) < 1e-4, "{basis:?} group {group}[{j}]: {a} vs {fd}");
            }
            offset += size;
        }
    }
}

#[test]
fn edge_gradients_match_finite_differences() {
    let mut rng = rng::stream(2, "test");
    for trial in 0..20 {
        let n = rng.random_range(3..=10);
        let (d, c) = (rng.random_range(1..=4), rng.random_range(2..=3));
        let g = random_graph(&mut rng, n, d, c);
        let basis = BASES[1 + trial % 4];
        let spec = ModelSpec::new(basis).with_k(3).with_hidden(5).without_dropout();
        let model = DiffusionModel::init(&spec, d, c, 100 + trial as u64).unwrap();
        let p = random_perturbation(&mut rng, n);
        let kind = if trial % 2 == 0 { LossKind::CrossEntropy } else { LossKind::TanhMargin };
        let idx: Vec<usize> = (0..n).collect();
        let labels = g.known_labels(&idx).unwrap();
        let (_, grad) = model.attack_gradient(&g, &p, &idx, &labels, kind).unwrap();
        assert_eq!(grad.len(), p.len());
        let h = 1e-6;
        for s in 0..p.len() {
            let mut up = p.clone();
            up.values_mut()[s] += h;
            let mut down = p.clone();
            down.values_mut()[s] -= h;
            let fd = (eval_loss(&model, &g, Some(&up), kind) - eval_loss(&model, &g, Some(&down), kind))
                / (2.0 * h);
            assert!(rel_err(grad[s], fd) < 1e-4, "{basis:?} slot {s}: {} vs {fd}", grad[s]);
        }
    }
}

#[test]
fn e0_coefficients_reproduce_the_mlp_bitwise() {
    let mut rng = rng::stream(3, "test");
    let g = random_graph(&mut rng, 9, 4, 3);
    let mlp = DiffusionModel::init(&ModelSpec::new(Basis::Mlp), 4, 3, 7).unwrap();
    let mut gpr = DiffusionModel::init(&ModelSpec::new(Basis::Monomial).with_k(4), 4, 3, 7).unwrap();
    gpr.layers = mlp.layers.clone();
    gpr.gamma = vec![1.0, 0.0, 0.0, 0.0, 0.0];
    assert_eq!(gpr.predict_logits(&g).unwrap(), mlp.predict_logits(&g).unwrap());
    // and the train-mode forward draws identical dropout masks
    let mut r1 = rng::stream(9, "dropout");
    let mut r2 = rng::stream(9, "dropout");
    let a = gpr.forward(&g, None, Mode::Train(&mut r1)).unwrap();
    let b = mlp.forward(&g, None, Mode::Train(&mut r2)).unwrap();
    assert_eq!(a.logits(), b.logits());

    let p = random_perturbation(&mut rng, 9);
    let idx: Vec<usize> = (0..9).collect();
    let labels = g.known_labels(&idx).unwrap();
    let (_, grad) = gpr.attack_gradient(&g, &p, &idx, &labels, LossKind::TanhMargin).unwrap();
    assert!(grad.iter().all(|&v| v == 0.0));
}

#[test]
fn e1_coefficients_apply_the_operator_once() {
    let mut rng = rng::stream(4, "test");
    let g = random_graph(&mut rng, 8, 3, 2);
    let mlp = DiffusionModel::init(&ModelSpec::new(Basis::Mlp), 3, 2, 1).unwrap();
    let mut gpr = DiffusionModel::init(&ModelSpec::new(Basis::Monomial).with_k(3), 3, 2, 1).unwrap();
    gpr.layers = mlp.layers.clone();
    gpr.gamma = vec![0.0, 1.0, 0.0, 0.0];
    let h = mlp.predict_logits(&g).unwrap();
    let op = build_normalized(&g, OperatorKind::SelfLoop, None).unwrap();
    assert_eq!(gpr.predict_logits(&g).unwrap(), op.matmul(&h).unwrap());
}

/// Power-basis coefficients of `T_k`.
fn chebyshev_power_coefficients(k: usize) -> Vec<f64> {
    let mut prev = vec![1.0];
    if k == 0 {
        return prev;
    }
    let mut cur = vec![0.0, 1.0];
    for _ in 1..k {
        let mut next = vec![0.0; cur.len() + 1];
        for (i, c) in cur.iter().enumerate() {
            next[i + 1] += 2.0 * c;
        }
        for (i, c) in prev.iter().enumerate() {
            next[i] -= c;
        }
        prev = cur;
        cur = next;
    }
    cur
}

#[test]
fn chebyshev_forward_matches_dense_bases() {
    let mut rng = rng::stream(5, "test");
    for k in 0..=4 {
        let g = random_graph(&mut rng, 7, 3, 2);
        let spec = ModelSpec::new(Basis::Chebyshev).with_k(k);
        let mut cheb = DiffusionModel::init(&spec, 3, 2, 3).unwrap();
        cheb.gamma = (0..=k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut mlp = DiffusionModel::init(&ModelSpec::new(Basis::Mlp), 3, 2, 3).unwrap();
        mlp.layers = cheb.layers.clone();
        let h = mlp.predict_logits(&g).unwrap();
        let l = build_normalized(&g, OperatorKind::Shifted, None).unwrap().to_dense();
        let coef = cheb.effective_coefficients();

        // powers of L
        let mut powers = vec![Matrix::identity(7)];
        for m in 1..=k {
            powers.push(powers[m - 1].matmul(&l).unwrap());
        }
        let mut total = Matrix::zeros(7, 7);
        for (kk, c) in coef.iter().enumerate() {
            for (m, a) in chebyshev_power_coefficients(kk).iter().enumerate() {
                total.add_scaled(&powers[m], c * a);
            }
        }
        let expected = total.matmul(&h).unwrap();
        let got = cheb.predict_logits(&g).unwrap();
        assert!(got.max_abs_diff(&expected) < 1e-10, "K={k}");

        if k == 2 {
            // T_0 = I, T_1 = L, T_2 = 2L² − I
            let mut t2 = powers[2].scale(2.0);
            t2.add_scaled(&Matrix::identity(7), -1.0);
            let mut direct = Matrix::identity(7).scale(coef[0]);
            direct.add_scaled(&l, coef[1]);
            direct.add_scaled(&t2, coef[2]);
            assert!(got.max_abs_diff(&direct.matmul(&h).unwrap()) < 1e-12);
        }
    }
}

#[test]
fn chebyshev_weights() {
    // all-ones node values give the identity filter
    let m = chebyshev_interpolation(5, ChebNorm::Interpolation);
    let c = m.matmul(&Matrix::column(vec![1.0; 6])).unwrap();
    assert!((c.data()[0] - 1.0).abs() < 1e-14);
    assert!(c.data()[1..].iter().all(|v| v.abs() < 1e-14));
    assert_eq!(chebyshev_t(3, 0.5), 4.0 * 0.125 - 3.0 * 0.5);
    let printed = chebyshev_interpolation(3, ChebNorm::Printed);
    assert!((printed[(0, 0)] - 1.0 * chebyshev_t(0, 0.0)).abs() < 1e-15);
    assert!(ModelSpec { cheb_norm: ChebNorm::Printed, ..ModelSpec::new(Basis::Chebyshev).with_k(1) }
        .validate()
        .is_err());
}

#[test]
fn appnp_coefficients_are_frozen_ppr() {
    let g = ppr_coefficients(0.1, 10);
    assert_eq!(g.len(), 11);
    assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let model = DiffusionModel::init(&ModelSpec::new(Basis::Appnp).without_dropout(), 3, 2, 0).unwrap();
    let mut rng = rng::stream(6, "test");
    let graph = random_graph(&mut rng, 6, 3, 2);
    let mut r = rng::stream(0, "d");
    let mut pass = model.forward(&graph, None, Mode::Train(&mut r)).unwrap();
    let l = pass.loss(LossKind::CrossEntropy, &[0, 1], &[0, 1]).unwrap();
    assert!(pass.backward_params(l).unwrap().gamma.is_none());
}

#[test]
fn gamma_gradient_with_zero_weights_matches_closed_form() {
    // zero weights: H is the broadcast output bias, so dℓ/dγ_k = Σ_i G_i · (L̊^k H)_i
    let g = Graph::new(
        3,
        [(0, 1), (1, 2)],
        Matrix::from_rows(&[vec![0.5], vec![-1.0], vec![2.0]]).unwrap(),
        vec![Some(0), Some(1), Some(1)],
        2,
    )
    .unwrap();
    let spec = ModelSpec::new(Basis::Monomial).with_k(2).with_hidden(2).without_dropout();
    let mut model = DiffusionModel::init(&spec, 1, 2, 0).unwrap();
    for l in &mut model.layers {
        l.w = Matrix::zeros(l.w.rows(), l.w.cols());
    }
    model.layers[1].b = vec![0.3, -0.2];
    model.gamma = vec![0.5, -0.25, 0.75];
    let mut r = rng::stream(0, "d");
    let mut pass = model.forward(&g, None, Mode::Train(&mut r)).unwrap();
    let loss = pass.loss(LossKind::CrossEntropy, &[0, 1, 2], &[0, 1, 1]).unwrap();
    let grads = pass.backward_params(loss).unwrap();

    let h = Matrix::from_rows(&vec![vec![0.3, -0.2]; 3]).unwrap();
    let op = build_normalized(&g, OperatorKind::SelfLoop, None).unwrap();
    let b1 = op.matmul(&h).unwrap();
    let b2 = op.matmul(&b1).unwrap();
    let mut logits = h.scale(0.5);
    logits.add_scaled(&b1, -0.25);
    logits.add_scaled(&b2, 0.75);
    let labels = [0usize, 1, 1];
    let mut gz = Matrix::zeros(3, 2);
    for i in 0..3 {
        let z = logits.row(i);
        let s: f64 = z.iter().map(|v| v.exp()).sum();
        for c in 0..2 {
            gz[(i, c)] = (z[c].exp() / s - f64::from(u8::from(c == labels[i]))) / 3.0;
        }
    }
    let expected: Vec<f64> = [&h, &b1, &b2].iter().map(|b| crate::linalg::dot(gz.data(), b.data())).collect();
    let got = grads.gamma.unwrap();
    for k in 0..3 {
        assert!((got[k] - expected[k]).abs() < 1e-14, "{k}: {} vs {}", got[k], expected[k]);
    }
}

#[test]
fn unused_class_gets_zero_gradient_and_scaling_is_linear() {
    let mut rng = rng::stream(7, "test");
    let g = random_graph(&mut rng, 6, 2, 3);
    let spec = ModelSpec::new(Basis::Monomial).with_k(2).with_hidden(4).without_dropout();
    let mut model = DiffusionModel::init(&spec, 2, 3, 1).unwrap();
    model.layers[1].b[2] = -1e6;
    let idx = [0, 1, 2, 3];
    let labels = [0, 1, 0, 1];
    let mut r = rng::stream(0, "d");
    let mut pass = model.forward(&g, None, Mode::Train(&mut r)).unwrap();
    let l = pass.loss(LossKind::TanhMargin, &idx, &labels).unwrap();
    let grads = pass.backward_params(l).unwrap();
    let w2 = &grads.layers[1].w;
    assert!((0..w2.rows()).all(|i| w2[(i, 2)] == 0.0));
    assert_eq!(grads.layers[1].b[2], 0.0);

    let doubled = pass.tape.scale(l, 2.0);
    let g2 = pass.backward_params(doubled).unwrap();
    for (a, b) in grads.slices().iter().zip(g2.slices()) {
        for (x, y) in a.iter().zip(b) {
            assert_eq!(2.0 * x, *y);
        }
    }
}

#[test]
fn eval_tape_refuses_parameter_gradients() {
    let mut rng = rng::stream(8, "test");
    let g = random_graph(&mut rng, 5, 2, 2);
    let model = DiffusionModel::init(&ModelSpec::new(Basis::Gcn), 2, 2, 0).unwrap();
    let mut pass = model.forward(&g, None, Mode::Eval).unwrap();
    let l = pass.loss(LossKind::CrossEntropy, &[0], &[1]).unwrap();
    assert!(pass.backward_params(l).is_err());
    assert!(pass.backward_edges(l).is_err());
    let wrong = Graph::new(5, [], Matrix::zeros(5, 3), vec![None; 5], 2).unwrap();
    assert!(matches!(model.forward(&wrong, None, Mode::Eval), Err(Error::Shape(_))));
}

#[test]
fn permutation_equivariance() {
    let mut rng = rng::stream(9, "test");
    let g = random_graph(&mut rng, 9, 3, 2);
    let mut perm: Vec<usize> = (0..9).collect();
    perm.shuffle(&mut rng);
    // node i of g becomes node perm[i]
    let mut inv = vec![0; 9];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    let edges: Vec<(usize, usize)> = g.edges().iter().map(|&(u, v)| (perm[u], perm[v])).collect();
    let x = g.features().select_rows(&inv);
    let y = inv.iter().map(|&i| g.labels()[i]).collect();
    let h = Graph::new(9, edges, x, y, 2).unwrap();
    for basis in BASES {
        let model = DiffusionModel::init(&ModelSpec::new(basis).with_k(4), 3, 2, 5).unwrap();
        let a = model.predict_logits(&g).unwrap();
        let b = model.predict_logits(&h).unwrap();
        for i in 0..9 {
            for c in 0..2 {
                assert!((a[(i, c)] - b[(perm[i], c)]).abs() < 1e-12, "{basis:?}");
            }
        }
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    for basis in BASES {
        let model = DiffusionModel::init(&ModelSpec::new(basis).with_k(3), 5, 3, 42).unwrap();
        let text = model.to_checkpoint(Some("abc")).unwrap();
        let back = DiffusionModel::from_checkpoint(&text).unwrap();
        assert_eq!(back, model);
        for (a, b) in back.layers[0].w.data().iter().zip(model.layers[0].w.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
    assert!(DiffusionModel::from_checkpoint("{\"basis\":\"mlp\"}").is_err());
}

#[test]
fn init_is_deterministic() {
    let spec = ModelSpec::new(Basis::Monomial);
    let a = DiffusionModel::init(&spec, 4, 2, 3).unwrap();
    assert_eq!(a, DiffusionModel::init(&spec, 4, 2, 3).unwrap());
    assert_ne!(a, DiffusionModel::init(&spec, 4, 2, 4).unwrap());
    assert!((a.gamma.iter().map(|v| v.abs()).sum::<f64>() - 1.0).abs() < 1e-12);
}
