use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use clauserec_app::artifacts::{Artifacts, ARTIFACTS_ENV};
use clauserec_app::config::TargetConfig;
use clauserec_app::models::Models;
use clauserec_app::service::{serve, AppState};
use clauserec_app::{Pipeline, PipelineConfig, Status};
use clauserec_core::corpus::{normalize_label, write_corpus, Clause, Contract, RawContract};
use clauserec_core::relevance::Method;
use clauserec_core::retriever::Variant;
use clauserec_core::synth::{synthetic_corpus, SynthConfig};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(
    name = "clauserec",
    version,
    about = "Clause recommendation pipeline and authoring service"
)]
struct Cli {
    /// Pipeline configuration file.
    #[arg(long, global = true, default_value = "clauserec.toml")]
    config: PathBuf,
    /// Artifact root directory.
    #[arg(long, global = true, env = ARTIFACTS_ENV, default_value = "artifacts")]
    artifacts: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Restricts the run to these clause types (repeatable).
    #[arg(long = "target", global = true)]
    targets: Vec<String>,
    /// Restricts relevance methods: cf, docsim, classifier (repeatable).
    #[arg(long = "method", global = true)]
    methods: Vec<Method>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read the corpus and build the per-type proxy datasets.
    Ingest,
    /// Fit the encoder and build representations and co-occurrence matrices.
    BuildIndex,
    /// Train one relevance classifier per target type.
    TrainClassifier,
    /// Train one clause decoder per target type.
    TrainGenerator,
    /// Write relevance and content-recommendation reports.
    Evaluate {
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every stage in order.
    Run,
    /// Rank library clauses and generate one clause for a contract file.
    Recommend {
        /// Contract as JSON: {"id": ..., "clauses": [{"label": ..., "text": ...}]}.
        #[arg(long)]
        contract: PathBuf,
        #[arg(long, default_value = "ii")]
        variant: Variant,
        #[arg(long)]
        top_n: Option<usize>,
    },
    /// Serve the authoring-session HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Restore sessions from and save them to this JSONL file.
        #[arg(long)]
        snapshot: Option<PathBuf>,
    },
    /// Write the seeded synthetic corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        contracts: usize,
    },
    /// Print a default configuration for a corpus file.
    DefaultConfig {
        #[arg(long)]
        corpus: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(&cli.config).with_context(|| format!("loading {}", cli.config.display()))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if !cli.targets.is_empty() {
        let wanted: Vec<String> = cli.targets.iter().map(|t| normalize_label(t)).collect();
        cfg.targets = wanted
            .iter()
            .map(|label| {
                cfg.target(label).cloned().unwrap_or(TargetConfig {
                    label: label.clone(),
                    docsim_k: None,
                    cf_threshold: None,
                    lrs: None,
                })
            })
            .collect();
    }
    if !cli.methods.is_empty() {
        cfg.methods = cli.methods.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report(stage: &str, status: Status) {
    println!("{stage}: {}", status.describe());
}

fn report_each(stage: &str, results: Vec<(String, Status)>) {
    for (label, status) in results {
        println!("{stage} [{label}]: {}", status.describe());
    }
}

fn read_contract(path: &Path, models: &Models) -> Result<Contract> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let raw: RawContract = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let mut clauses = Vec::new();
    for c in raw.clauses {
        let label = normalize_label(&c.label);
        let Some(kind) = models.types.id(&label) else {
            bail!("clause type {label:?} does not occur in the corpus");
        };
        clauses.push(Clause::new(kind, c.text));
    }
    Ok(Contract { id: raw.id, clauses })
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let art = Artifacts::new(&cli.artifacts);

    match &cli.command {
        Command::Synth { out, contracts } => {
            let corpus = synthetic_corpus(&SynthConfig {
                contracts: *contracts,
                seed: cli.seed.unwrap_or(SynthConfig::default().seed),
                ..SynthConfig::default()
            })?;
            let mut buf = Vec::new();
            write_corpus(&corpus, &mut buf)?;
            std::fs::write(out, buf).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} contracts to {}", corpus.len(), out.display());
            return Ok(());
        }
        Command::DefaultConfig { corpus } => {
            print!("{}", PipelineConfig::with_corpus(corpus).to_toml()?);
            return Ok(());
        }
        _ => {}
    }

    let pipeline = Pipeline::new(load_config(&cli)?, art);
    match &cli.command {
        Command::Ingest => report("ingest", pipeline.ingest()?),
        Command::BuildIndex => report("build-index", pipeline.build_index()?),
        Command::TrainClassifier => report_each("train-classifier", pipeline.train_classifiers()?),
        Command::TrainGenerator => report_each("train-generator", pipeline.train_generators()?),
        Command::Evaluate { out } => {
            let (status, _) = pipeline.evaluate(out.as_deref())?;
            report("evaluate", status);
            let table = std::fs::read_to_string(pipeline.art.report_table()).unwrap_or_default();
            print!("{table}");
        }
        Command::Run => {
            report("ingest", pipeline.ingest()?);
            report("build-index", pipeline.build_index()?);
            if pipeline.cfg.uses(Method::Classifier) {
                report_each("train-classifier", pipeline.train_classifiers()?);
            }
            if pipeline.cfg.generator.enabled {
                report_each("train-generator", pipeline.train_generators()?);
            }
            let (status, _) = pipeline.evaluate(None)?;
            report("evaluate", status);
            print!(
                "{}",
                std::fs::read_to_string(pipeline.art.report_table()).unwrap_or_default()
            );
        }
        Command::Recommend {
            contract,
            variant,
            top_n,
        } => {
            let Some(target) = pipeline.cfg.targets.first().map(|t| t.label.clone()) else {
                bail!("no target clause type; pass --target");
            };
            if cli.targets.is_empty() && pipeline.cfg.targets.len() > 1 {
                bail!("recommend needs exactly one --target");
            }
            let models = Models::load(&pipeline)?;
            let contract = read_contract(contract, &models)?;
            let t = models
                .types
                .id(&target)
                .with_context(|| format!("clause type {target:?} does not occur in the corpus"))?;
            if contract.has_type(t) {
                eprintln!(
                    "warning: the contract already contains a {target:?} clause; relevance prediction would not have proposed it"
                );
            }
            let top_n = top_n.unwrap_or(pipeline.cfg.retrieval.top_n);
            println!("retrieved ({target}, variant {}):", variant.as_str());
            for r in models.retrieve(&contract, t, *variant, top_n)? {
                println!(
                    "{:>3}. [{:.4}] {} (from {} #{})",
                    r.rank, r.score, r.text, r.source_contract, r.clause_index
                );
            }
            match models.generate(&contract, t)? {
                Some(g) => println!("generated{}: {}", if g.truncated { " (truncated)" } else { "" }, g.text),
                None => println!("generated: no generator trained for {target:?}"),
            }
        }
        Command::Serve { addr, snapshot } => {
            let models = Models::load(&pipeline)?;
            let state = Arc::new(AppState::new(models));
            tokio::runtime::Runtime::new()?.block_on(serve(*addr, state, snapshot.clone()))?;
        }
        Command::Synth { .. } | Command::DefaultConfig { .. } => unreachable!("handled above"),
    }
    Ok(())
}
