//! Config-driven pipelines: dataset → split → train → evaluate → export.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::analysis::{evaluate, spectral_filter, spectrum_csv, EvalRow, MAX_SPECTRUM_NODES};
use crate::attack::AttackConfig;
use crate::data::{karate_club, make_split, sample_csbm, CsbmParams, Split};
use crate::graph::{load_graph, save_graph_with_header, Graph};
use crate::model::{Basis, DiffusionModel, ModelSpec};
use crate::rng::derive_seed;
use crate::train::{history_csv, train, TrainConfig, TrainOutcome};
use crate::{Error, Result};

pub const EDGE_FILE: &str = "edges.txt";
pub const FEATURE_FILE: &str = "features.csv";
pub const LABEL_FILE: &str = "labels.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Resampled for every run seed.
    Csbm(CsbmParams),
    Karate,
    Files { edges: PathBuf, features: PathBuf, labels: PathBuf },
}

impl DatasetSpec {
    pub fn files_in(dir: &Path) -> Self {
        DatasetSpec::Files {
            edges: dir.join(EDGE_FILE),
            features: dir.join(FEATURE_FILE),
            labels: dir.join(LABEL_FILE),
        }
    }

    /// Loads or generates the graph; `seed` replaces the CSBM seed.
    pub fn build(&self, seed: Option<u64>) -> Result<Graph> {
        match self {
            DatasetSpec::Csbm(p) => {
                let p = CsbmParams { seed: seed.unwrap_or(p.seed), ..p.clone() };
                sample_csbm(&p)
            }
            DatasetSpec::Karate => Ok(karate_club()),
            DatasetSpec::Files { edges, features, labels } => load_graph(edges, features, labels),
        }
    }
}

fn default_per_class() -> usize {
    20
}
fn default_test_fraction() -> f64 {
    0.1
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    #[serde(default = "default_per_class")]
    pub per_class_train: usize,
    #[serde(default = "default_per_class")]
    pub per_class_val: usize,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_true")]
    pub inductive: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            per_class_train: default_per_class(),
            per_class_val: default_per_class(),
            test_fraction: default_test_fraction(),
            inductive: true,
        }
    }
}

impl SplitSpec {
    pub fn make(&self, graph: &Graph, seed: u64) -> Result<Split> {
        make_split(graph, self.per_class_train, self.per_class_val, self.test_fraction, self.inductive, seed)
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub split: SplitSpec,
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub attacks: Vec<AttackConfig>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_value(serde_json::from_str(text)?)
    }

    fn from_value(v: Value) -> Result<Self> {
        let c: ExperimentConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Reads a config file and applies `key.path=value` overrides; values
    /// are parsed as JSON, falling back to plain strings.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut v: Value = serde_json::from_str(&text)?;
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        Self::from_value(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        if let DatasetSpec::Files { edges, features, labels } = &self.dataset {
            for p in [edges, features, labels] {
                if !p.exists() {
                    return Err(Error::Config(format!("dataset file {} does not exist", p.display())));
                }
            }
        }
        if let DatasetSpec::Csbm(p) = &self.dataset {
            p.validate()?;
        }
        self.model.validate()?;
        self.train.validate()?;
        for a in &self.attacks {
            a.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let last = i + 1 == keys.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(key.to_string(), value);
                    return Ok(());
                }
                map.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = key
                    .parse()
                    .map_err(|_| Error::Config(format!("'{key}' in '{path}' is not an array index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| Error::Config(format!("index {idx} out of range ({len}) in '{path}'")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(Error::Config(format!("'{path}' descends into a non-object"))),
        };
    }
    Ok(())
}

/// Everything one seed of an experiment produces.
pub struct SeedRun {
    pub seed: u64,
    pub graph: Graph,
    pub split: Split,
    pub outcome: TrainOutcome,
    pub rows: Vec<EvalRow>,
}

pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    let graph = config.dataset.build(Some(derive_seed(seed, "dataset")))?;
    let split = config.split.make(&graph, derive_seed(seed, "split"))?;
    let train_config = TrainConfig { seed: derive_seed(seed, "train"), ..config.train.clone() };
    let outcome = train(&config.model, &graph, &split, &train_config)?;
    let rows = evaluate(&outcome.model, &graph, &split, &config.attacks, derive_seed(seed, "eval"))?;
    Ok(SeedRun { seed, graph, split, outcome, rows })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub attack: String,
    pub epsilon: f64,
    pub local_rule: String,
    pub clean_mean: f64,
    pub clean_sem: f64,
    pub robust_mean: f64,
    pub robust_sem: f64,
    pub seeds: usize,
}

/// Mean and standard error of the mean (sample standard deviation over
/// `√k`, 0 for a single value).
pub fn mean_sem(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Parameter("cannot aggregate zero values".into()));
    }
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    Ok((mean, (var / k).sqrt()))
}

/// Groups rows by `(attack, epsilon, local_rule)` in first-seen order.
pub fn aggregate(per_seed: &[Vec<EvalRow>]) -> Result<Vec<SummaryRow>> {
    if per_seed.is_empty() {
        return Err(Error::Parameter("no per-seed results to aggregate".into()));
    }
    let mut keys: Vec<(String, f64, String)> = Vec::new();
    for rows in per_seed {
        for r in rows {
            let key = (r.attack.clone(), r.epsilon, r.local_rule.clone());
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
    }
    keys.into_iter()
        .map(|(attack, epsilon, local_rule)| {
            let matching: Vec<&EvalRow> = per_seed
                .iter()
                .flatten()
                .filter(|r| r.attack == attack && r.epsilon == epsilon && r.local_rule == local_rule)
                .collect();
            let clean: Vec<f64> = matching.iter().map(|r| r.clean_acc).collect();
            let robust: Vec<f64> = matching.iter().map(|r| r.robust_acc).collect();
            let (clean_mean, clean_sem) = mean_sem(&clean)?;
            let (robust_mean, robust_sem) = mean_sem(&robust)?;
            Ok(SummaryRow {
                attack,
                epsilon,
                local_rule,
                clean_mean,
                clean_sem,
                robust_mean,
                robust_sem,
                seeds: matching.len(),
            })
        })
        .collect()
}

fn header(hash: &str, seeds: &str) -> String {
    format!("# config_hash={hash}\n# seeds={seeds}\n")
}

pub fn summary_csv(rows: &[SummaryRow], hash: &str, seeds: &[u64]) -> String {
    let seeds: Vec<String> = seeds.iter().map(u64::to_string).collect();
    let mut out = header(hash, &seeds.join(" "));
    if seeds.len() == 1 {
        out.push_str("# single seed: standard errors are reported as 0\n");
    }
    out.push_str("attack,epsilon,local_rule,clean_mean,clean_sem,robust_mean,robust_sem,seeds\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.attack, r.epsilon, r.local_rule, r.clean_mean, r.clean_sem, r.robust_mean, r.robust_sem, r.seeds
        ));
    }
    out
}

/// Prefixes a CSV body with the config hash and seed.
pub fn with_header(body: &str, hash: &str, seed: u64) -> String {
    header(hash, &seed.to_string()) + body
}

/// Runs every seed (in parallel) and writes `results.csv`, per-seed
/// reports, histories, checkpoints and spectra under `out`.
pub fn repro(config: &ExperimentConfig, out: &Path) -> Result<Vec<SummaryRow>> {
    config.validate()?;
    let hash = config.hash();
    let runs: Vec<Result<SeedRun>> = std::thread::scope(|scope| {
        let handles: Vec<_> = config
            .seeds
            .iter()
            .map(|&seed| scope.spawn(move || run_seed(config, seed)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Internal("worker panicked".into()))))
            .collect()
    });
    let runs: Vec<SeedRun> = runs.into_iter().collect::<Result<_>>()?;

    for dir in ["checkpoints", "spectra", "history", "reports"] {
        fs::create_dir_all(out.join(dir))?;
    }
    for run in &runs {
        let s = run.seed;
        fs::write(
            out.join("checkpoints").join(format!("seed-{s}.json")),
            run.outcome.model.to_checkpoint(Some(&hash))?,
        )?;
        fs::write(
            out.join("history").join(format!("seed-{s}.csv")),
            with_header(&history_csv(&run.outcome.history), &hash, s),
        )?;
        fs::write(
            out.join("reports").join(format!("seed-{s}.csv")),
            with_header(&crate::analysis::report_csv(&run.rows), &hash, s),
        )?;
        if let Some(csv) = spectrum_export(&run.outcome.model, &run.graph, &run.split)? {
            fs::write(out.join("spectra").join(format!("seed-{s}.csv")), with_header(&csv, &hash, s))?;
        }
    }
    let per_seed: Vec<Vec<EvalRow>> = runs.into_iter().map(|r| r.rows).collect();
    let summary = aggregate(&per_seed)?;
    fs::write(out.join("results.csv"), summary_csv(&summary, &hash, &config.seeds))?;
    Ok(summary)
}

/// Spectral response on the training view when the model is a polynomial
/// filter and the graph is small enough.
fn spectrum_export(model: &DiffusionModel, graph: &Graph, split: &Split) -> Result<Option<String>> {
    if matches!(model.spec.basis, Basis::Gcn | Basis::Mlp) {
        return Ok(None);
    }
    let view = crate::data::training_view(graph, split)?;
    if view.graph.num_nodes() > MAX_SPECTRUM_NODES {
        return Ok(None);
    }
    Ok(Some(spectrum_csv(&spectral_filter(model, &view.graph)?)))
}

/// Writes the three graph files into `dir`.
pub fn save_graph_dir(graph: &Graph, dir: &Path, header: Option<&str>) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_graph_with_header(graph, &dir.join(EDGE_FILE), &dir.join(FEATURE_FILE), &dir.join(LABEL_FILE), header)
}

pub fn load_graph_dir(dir: &Path) -> Result<Graph> {
    load_graph(&dir.join(EDGE_FILE), &dir.join(FEATURE_FILE), &dir.join(LABEL_FILE))
}
