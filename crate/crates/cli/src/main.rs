use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use robustgnn::analysis::{evaluate, matrix_csv, report_csv, spectral_filter, spectrum_csv, total_diffusion};
use robustgnn::attack::{attack, AttackConfig, AttackReport, AttackTarget};
use robustgnn::data::{evaluation_view, karate_club, Split};
use robustgnn::experiment::{apply_override, repro, save_graph_dir, with_header, DatasetSpec, ExperimentConfig};
use robustgnn::model::DiffusionModel;
use robustgnn::rng::derive_seed;
use robustgnn::train::{accuracy_under, history_csv, train, TrainConfig};
use robustgnn::{Error, Graph, Result};

/// Adversarial robustness of graph neural networks: data, training,
/// attacks and spectral analysis.
#[derive(Parser)]
#[command(name = "robustgnn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; defaults to the first seed of the config
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// `dot.path=value` config override, repeatable
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Directory with edges.txt, features.csv and labels.csv, replacing the
    /// config dataset
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Split file written by `split`
    #[arg(long)]
    split: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write dataset files
    Gen {
        #[command(flatten)]
        common: Common,
        /// Write the Karate Club fixture instead of the config dataset
        #[arg(long)]
        karate: bool,
    },
    /// Sample a split and write split.json
    Split {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write checkpoint.json and history.csv
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Attack a checkpoint with every configured attack
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Clean and robust test accuracy of a checkpoint
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Spectral response of a checkpoint on the training graph
    Spectrum {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Dense total diffusion matrix of a checkpoint
    Diffuse {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Full pipeline over all seeds
    Repro {
        #[command(flatten)]
        common: Common,
    },
}

/// Config, graph and split resolved from the common flags.
struct Context {
    config: ExperimentConfig,
    seed: u64,
    out: PathBuf,
    hash: String,
}

impl Context {
    fn new(common: &Common) -> Result<Self> {
        let mut config = match &common.config {
            Some(path) => ExperimentConfig::load(path, &common.overrides)?,
            None => {
                // Karate Club with a GPRGNN unless overridden
                let mut v = serde_json::json!({"dataset": "karate", "model": {"basis": "monomial"}});
                for o in &common.overrides {
                    apply_override(&mut v, o)?;
                }
                ExperimentConfig::from_json(&v.to_string())?
            }
        };
        if let Some(dir) = &common.graph {
            config.dataset = DatasetSpec::files_in(dir);
        }
        let seed = common.seed.unwrap_or(config.seeds[0]);
        let out = common.out.clone().unwrap_or_else(|| config.out_dir.clone());
        let hash = config.hash();
        Ok(Context { config, seed, out, hash })
    }

    fn graph(&self) -> Result<Graph> {
        self.config.dataset.build(Some(derive_seed(self.seed, "dataset")))
    }

    fn split(&self, common: &Common, graph: &Graph) -> Result<Split> {
        match &common.split {
            Some(path) => {
                let s = Split::from_json(&fs::read_to_string(path)?)?;
                s.validate(graph.num_nodes())?;
                Ok(s)
            }
            None => self.config.split.make(graph, derive_seed(self.seed, "split")),
        }
    }

    fn write(&self, name: &str, body: &str) -> Result<()> {
        fs::create_dir_all(&self.out)?;
        let path = self.out.join(name);
        fs::write(&path, body)?;
        println!("wrote {}", path.display());
        Ok(())
    }
}

fn load_checkpoint(path: &Path) -> Result<DiffusionModel> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read checkpoint {}: {e}", path.display())))?;
    DiffusionModel::from_checkpoint(&text)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common, karate } => {
            let ctx = Context::new(&common)?;
            let graph = if karate { karate_club() } else { ctx.graph()? };
            let header = format!("config_hash={} seed={}", ctx.hash, ctx.seed);
            save_graph_dir(&graph, &ctx.out, Some(&header))?;
            println!("wrote {} nodes, {} edges to {}", graph.num_nodes(), graph.num_edges(), ctx.out.display());
        }
        Command::Split { common } => {
            let ctx = Context::new(&common)?;
            let graph = ctx.graph()?;
            ctx.write("split.json", &ctx.split(&common, &graph)?.to_json()?)?;
        }
        Command::Train { common } => {
            let ctx = Context::new(&common)?;
            let graph = ctx.graph()?;
            let split = ctx.split(&common, &graph)?;
            let config = TrainConfig { seed: derive_seed(ctx.seed, "train"), ..ctx.config.train.clone() };
            let out = train(&ctx.config.model, &graph, &split, &config)?;
            ctx.write("checkpoint.json", &out.model.to_checkpoint(Some(&ctx.hash))?)?;
            ctx.write("history.csv", &with_header(&history_csv(&out.history), &ctx.hash, ctx.seed))?;
        }
        Command::Attack { common, checkpoint } => {
            let ctx = Context::new(&common)?;
            let model = load_checkpoint(&checkpoint)?;
            let graph = ctx.graph()?;
            let split = ctx.split(&common, &graph)?;
            let view = evaluation_view(&graph, &split)?;
            let targets = view.local(&split.test)?;
            let labels = graph.known_labels(&split.test)?;
            let at = AttackTarget { graph: &view.graph, targets: &targets, labels: &labels };
            let clean = accuracy_under(&model, &view.graph, &Default::default(), &targets, &labels)?;
            if ctx.config.attacks.is_empty() {
                return Err(Error::Config("the config lists no attacks".into()));
            }
            for (i, a) in ctx.config.attacks.iter().enumerate() {
                let config = AttackConfig { seed: derive_seed(ctx.seed, &format!("attack-{i}")), ..a.clone() };
                let budget = config.budget(&view.graph, &targets)?;
                let flips = attack(&model, &at, &budget, &config)?;
                let report = AttackReport {
                    attack: config.kind,
                    epsilon: config.epsilon,
                    delta: budget.global,
                    local_rule: config.local_rule,
                    flips: flips.len(),
                    clean_acc: clean,
                    robust_acc: accuracy_under(&model, &view.graph, &flips, &targets, &labels)?,
                    seed: ctx.seed,
                };
                ctx.write(&format!("perturbation-{i}.json"), &flips.to_json(&view.graph)?)?;
                ctx.write(&format!("attack-{i}.json"), &serde_json::to_string_pretty(&report)?)?;
            }
        }
        Command::Eval { common, checkpoint } => {
            let ctx = Context::new(&common)?;
            let model = load_checkpoint(&checkpoint)?;
            let graph = ctx.graph()?;
            let split = ctx.split(&common, &graph)?;
            let rows = evaluate(&model, &graph, &split, &ctx.config.attacks, derive_seed(ctx.seed, "eval"))?;
            let csv = report_csv(&rows);
            print!("{csv}");
            ctx.write("report.csv", &with_header(&csv, &ctx.hash, ctx.seed))?;
        }
        Command::Spectrum { common, checkpoint } => {
            let ctx = Context::new(&common)?;
            let model = load_checkpoint(&checkpoint)?;
            let graph = training_graph(&ctx, &common)?;
            let csv = spectrum_csv(&spectral_filter(&model, &graph)?);
            ctx.write("spectrum.csv", &with_header(&csv, &ctx.hash, ctx.seed))?;
        }
        Command::Diffuse { common, checkpoint } => {
            let ctx = Context::new(&common)?;
            let model = load_checkpoint(&checkpoint)?;
            let graph = training_graph(&ctx, &common)?;
            let csv = matrix_csv(&total_diffusion(&model, &graph)?);
            ctx.write("diffusion.csv", &with_header(&csv, &ctx.hash, ctx.seed))?;
        }
        Command::Repro { common } => {
            let ctx = Context::new(&common)?;
            let summary = repro(&ctx.config, &ctx.out)?;
            for r in summary {
                println!(
                    "{} eps={} {}: clean {:.4} ± {:.4}, robust {:.4} ± {:.4}",
                    r.attack, r.epsilon, r.local_rule, r.clean_mean, r.clean_sem, r.robust_mean, r.robust_sem
                );
            }
            println!("wrote {}", ctx.out.join("results.csv").display());
        }
    }
    Ok(())
}

fn training_graph(ctx: &Context, common: &Common) -> Result<Graph> {
    let graph = ctx.graph()?;
    let split = ctx.split(common, &graph)?;
    Ok(robustgnn::data::training_view(&graph, &split)?.graph)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
