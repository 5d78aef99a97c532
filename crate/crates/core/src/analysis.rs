//! Diffusion interpretation (coefficients, total diffusion, spectral
//! response) and robustness evaluation.

use serde::Serialize;

use crate::attack::{attack, AttackConfig, AttackTarget, LocalRule};
use crate::data::{evaluation_view, Split};
use crate::graph::{build_normalized, Graph, OperatorKind};
use crate::linalg::Matrix;
use crate::model::{accuracy, Basis, DiffusionModel, Predictor};
use crate::rng::derive_seed;
use crate::{Error, Result};

/// Sign-normalizes so the leading non-zero coefficient is non-negative and
/// scales to unit ℓ1 norm.
pub fn normalize_gamma(gamma: &[f64]) -> Result<Vec<f64>> {
    let l1: f64 = gamma.iter().map(|g| g.abs()).sum();
    if !(l1 > 0.0) || !l1.is_finite() {
        return Err(Error::Parameter("cannot normalize an all-zero coefficient vector".into()));
    }
    let first = gamma.iter().find(|g| **g != 0.0).copied().unwrap_or(0.0);
    let s = if first < 0.0 { -1.0 } else { 1.0 };
    Ok(gamma.iter().map(|g| s * g / l1).collect())
}

pub const MAX_DIFFUSION_NODES: usize = 5000;
pub const MAX_SPECTRUM_NODES: usize = 2000;

fn polynomial_parts(model: &DiffusionModel, graph: &Graph) -> Result<(Vec<f64>, Option<Matrix>)> {
    match model.spec.basis {
        Basis::Mlp => Ok((vec![1.0], None)),
        Basis::Gcn => Err(Error::Parameter("a GCN has no single polynomial diffusion".into())),
        _ => {
            let kind = model.spec.operator_kind().unwrap();
            let op = build_normalized(graph, kind, None)?.to_dense();
            Ok((model.effective_coefficients(), Some(op)))
        }
    }
}

/// Dense basis matrices `B_k`: powers of `L̊`, or `T_k` of the shifted
/// operator for the Chebyshev basis.
pub fn basis_matrices(model: &DiffusionModel, graph: &Graph) -> Result<Vec<Matrix>> {
    let n = graph.num_nodes();
    let (coef, op) = polynomial_parts(model, graph)?;
    let mut out = vec![Matrix::identity(n)];
    let Some(op) = op else { return Ok(out) };
    let cheb = model.spec.basis == Basis::Chebyshev;
    for k in 1..coef.len() {
        let next = op.matmul(&out[k - 1])?;
        let next = if cheb && k >= 2 {
            let mut t = next.scale(2.0);
            t.add_scaled(&out[k - 2], -1.0);
            t
        } else {
            next
        };
        out.push(next);
    }
    Ok(out)
}

/// `T = Σ_k c_k B_k`.
pub fn total_diffusion(model: &DiffusionModel, graph: &Graph) -> Result<Matrix> {
    let n = graph.num_nodes();
    if n > MAX_DIFFUSION_NODES {
        return Err(Error::Capacity(format!("dense diffusion limited to {MAX_DIFFUSION_NODES} nodes, got {n}")));
    }
    let coef = polynomial_parts(model, graph)?.0;
    let mut t = Matrix::zeros(n, n);
    for (c, b) in coef.iter().zip(basis_matrices(model, graph)?) {
        t.add_scaled(&b, *c);
    }
    Ok(t)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// ascending eigenvalues and the eigenvectors as columns.
pub fn jacobi_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::Shape(format!("eigendecomposition of a {}x{} matrix", n, a.cols())));
    }
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let off = |m: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[(i, j)] * m[(i, j)];
                }
            }
        }
        s.sqrt()
    };
    let mut sweeps = 0;
    while off(&m) > 1e-10 {
        if sweeps == 100 {
            return Err(Error::Numeric(format!("Jacobi did not converge in 100 sweeps (off = {:e})", off(&m))));
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[(k, p)], m[(k, q)]);
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[(p, k)], m[(q, k)]);
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].total_cmp(&m[(j, j)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (new, &old) in order.iter().enumerate() {
        for k in 0..n {
            vectors[(k, new)] = v[(k, old)];
        }
    }
    Ok((values, vectors))
}

/// `I − D^{-1/2} A D^{-1/2}` without self-loops.
pub fn laplacian(graph: &Graph) -> Result<Matrix> {
    let n = graph.num_nodes();
    let mut l = build_normalized(graph, OperatorKind::Shifted, None)?.to_dense();
    for i in 0..n {
        l[(i, i)] += 1.0;
    }
    Ok(l)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpectralFilter {
    pub eigenvalues: Vec<f64>,
    pub response: Vec<f64>,
}

/// `g(λ) = diag(Vᵀ T V)` with `V` the eigenvectors of the plain normalized
/// Laplacian and `T` the model's total diffusion.
pub fn spectral_filter(model: &DiffusionModel, graph: &Graph) -> Result<SpectralFilter> {
    let n = graph.num_nodes();
    if n > MAX_SPECTRUM_NODES {
        return Err(Error::Capacity(format!("spectral filter limited to {MAX_SPECTRUM_NODES} nodes, got {n}")));
    }
    let (eigenvalues, v) = jacobi_eigen(&laplacian(graph)?)?;
    let tv = total_diffusion(model, graph)?.matmul(&v)?;
    let response = (0..n).map(|j| (0..n).map(|i| v[(i, j)] * tv[(i, j)]).sum()).collect();
    Ok(SpectralFilter { eigenvalues, response })
}

pub fn spectrum_csv(filter: &SpectralFilter) -> String {
    let mut out = String::from("lambda,response\n");
    for (l, r) in filter.eigenvalues.iter().zip(&filter.response) {
        out.push_str(&format!("{l},{r}\n"));
    }
    out
}

pub fn matrix_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|x| x.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub attack: String,
    pub epsilon: f64,
    pub local_rule: String,
    pub delta: usize,
    pub flips: usize,
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub seed: u64,
}

fn rule_name(rule: LocalRule) -> &'static str {
    match rule {
        LocalRule::HalfDegree => "half_degree",
        LocalRule::QuarterDegree => "quarter_degree",
        LocalRule::Unlimited => "unlimited",
    }
}

/// Clean accuracy on the test nodes, then one row per attack on the full
/// evaluation view.
pub fn evaluate(
    model: &dyn Predictor,
    graph: &Graph,
    split: &Split,
    attacks: &[AttackConfig],
    seed: u64,
) -> Result<Vec<EvalRow>> {
    let view = evaluation_view(graph, split)?;
    let targets = view.local(&split.test)?;
    let labels = graph.known_labels(&split.test)?;
    let clean = accuracy(&model.predict(&view.graph)?, &targets, &labels);
    let mut rows = vec![EvalRow {
        attack: "none".into(),
        epsilon: 0.0,
        local_rule: rule_name(LocalRule::Unlimited).into(),
        delta: 0,
        flips: 0,
        clean_acc: clean,
        robust_acc: clean,
        seed,
    }];
    let at = AttackTarget { graph: &view.graph, targets: &targets, labels: &labels };
    for (i, a) in attacks.iter().enumerate() {
        let config = AttackConfig { seed: derive_seed(seed, &format!("eval-attack-{i}")), ..a.clone() };
        let budget = config.budget(&view.graph, &targets)?;
        let flips = attack(model, &at, &budget, &config)?;
        let robust = crate::train::accuracy_under(model, &view.graph, &flips, &targets, &labels)?;
        let rule = if config.kind.uses_local() { config.local_rule } else { LocalRule::Unlimited };
        rows.push(EvalRow {
            attack: serde_json::to_value(config.kind)?.as_str().unwrap_or_default().to_string(),
            epsilon: config.epsilon,
            local_rule: rule_name(rule).into(),
            delta: budget.global,
            flips: flips.len(),
            clean_acc: clean,
            robust_acc: robust,
            seed,
        });
    }
    Ok(rows)
}

pub fn report_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from("attack,epsilon,local_rule,clean_acc,robust_acc,seed\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.attack, r.epsilon, r.local_rule, r.clean_acc, r.robust_acc, r.seed
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::karate_club;
    use crate::model::ModelSpec;

    fn model_with(basis: Basis, gamma: Vec<f64>, graph: &Graph) -> DiffusionModel {
        let spec = ModelSpec::new(basis).with_k(gamma.len() - 1);
        let mut m = DiffusionModel::init(&spec, graph.feature_dim(), graph.num_classes(), 0).unwrap();
        m.gamma = gamma;
        m
    }

    #[test]
    fn gamma_normalization() {
        assert_eq!(normalize_gamma(&[-0.5, 0.5]).unwrap(), vec![0.5, -0.5]);
        assert_eq!(normalize_gamma(&[2.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(normalize_gamma(&[0.0, -3.0, 1.0]).unwrap(), vec![0.0, 0.75, -0.25]);
        assert!(normalize_gamma(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn unit_coefficients_give_identity_and_operator() {
        let g = karate_club();
        let t = total_diffusion(&model_with(Basis::Monomial, vec![1.0, 0.0, 0.0], &g), &g).unwrap();
        assert_eq!(t, Matrix::identity(34));
        let t = total_diffusion(&model_with(Basis::Monomial, vec![0.0, 1.0], &g), &g).unwrap();
        assert_eq!(t, build_normalized(&g, OperatorKind::SelfLoop, None).unwrap().to_dense());
    }

    #[test]
    fn two_node_path_closed_form() {
        let g = Graph::new(2, [(0, 1)], Matrix::identity(2), vec![Some(0), Some(1)], 2).unwrap();
        let f = spectral_filter(&model_with(Basis::Monomial, vec![0.0, 1.0], &g), &g).unwrap();
        // L = [[1,-1],[-1,1]] has eigenvalues 0 and 2 with vectors (1,1)/√2 and (1,-1)/√2;
        // L̊ = 0.5·ones gives responses 1 and 0
        assert!((f.eigenvalues[0] - 0.0).abs() < 1e-10 && (f.eigenvalues[1] - 2.0).abs() < 1e-10);
        assert!((f.response[0] - 1.0).abs() < 1e-10 && f.response[1].abs() < 1e-10);
    }

    #[test]
    fn jacobi_on_karate() {
        let g = karate_club();
        let (vals, v) = jacobi_eigen(&laplacian(&g).unwrap()).unwrap();
        let vtv = v.t_matmul(&v).unwrap();
        assert!(vtv.max_abs_diff(&Matrix::identity(34)) <= 1e-8);
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        assert!(vals[0].abs() < 1e-9 && vals.iter().all(|&l| (-1e-9..=2.0 + 1e-9).contains(&l)));
        let f = spectral_filter(&model_with(Basis::Monomial, vec![1.0, 0.0, 0.0], &g), &g).unwrap();
        assert!(f.response.iter().all(|r| (r - 1.0).abs() <= 1e-8));
    }

    #[test]
    fn parseval_consistency() {
        let g = karate_club();
        for basis in [Basis::Monomial, Basis::Chebyshev] {
            let m = model_with(basis, vec![0.3, -0.2, 0.5, 0.1], &g);
            let f = spectral_filter(&m, &g).unwrap();
            let tr = total_diffusion(&m, &g).unwrap().trace();
            assert!((f.response.iter().sum::<f64>() - tr).abs() < 1e-8);
        }
    }

    #[test]
    fn horner_matches_power_sum() {
        let g = karate_club();
        let gamma = vec![0.4, -0.3, 0.2, 0.05, -0.05];
        let m = model_with(Basis::Monomial, gamma.clone(), &g);
        let l = build_normalized(&g, OperatorKind::SelfLoop, None).unwrap().to_dense();
        let mut h = Matrix::identity(34).scale(gamma[4]);
        for k in (0..4).rev() {
            h = l.matmul(&h).unwrap();
            h.add_scaled(&Matrix::identity(34), gamma[k]);
        }
        assert!(total_diffusion(&m, &g).unwrap().max_abs_diff(&h) < 1e-10);
    }

    #[test]
    fn gcn_has_no_total_diffusion() {
        let g = karate_club();
        let m = DiffusionModel::init(&ModelSpec::new(Basis::Gcn), 34, 2, 0).unwrap();
        assert!(total_diffusion(&m, &g).is_err());
    }
}
