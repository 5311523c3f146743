use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use colmatch::ablation::{run_grid, ExperimentGrid};
use colmatch::augment::{build_classes, load_classes, write_classes, AugmentConfig};
use colmatch::embedding::{Embedder, ProviderKind};
use colmatch::finetune::{train, TrainConfig};
use colmatch::llm::{ChatClient, HttpChatClient, LlmConfig, RecordingChatClient, ReplayChatClient};
use colmatch::pipeline::{Pipeline, PipelineConfig, Preset, Reranker};
use colmatch::sampling::Strategy;
use colmatch::serialize::Format;
use colmatch::table::{load_ground_truth, load_table, Table};

#[derive(Parser)]
#[command(name = "colmatch", version, about = "Column schema matching: retrieve candidate column pairs by embedding similarity, then rerank")]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Match the columns of SOURCE against TARGET.
    Match {
        source: PathBuf,
        target: PathBuf,
        /// Match list JSON output (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the match list as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Match and score against a ground-truth file.
    Evaluate {
        source: PathBuf,
        target: PathBuf,
        ground_truth: PathBuf,
        /// Report JSON output.
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Build training classes from a target table.
    Augment {
        target: PathBuf,
        /// Classes file (JSON lines).
        #[arg(long)]
        out: PathBuf,
        /// Structural variants only; no LLM requests.
        #[arg(long)]
        no_llm: bool,
        #[arg(long, default_value_t = 2)]
        n_structural: usize,
        #[arg(long, default_value_t = 3)]
        n_semantic: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        llm: LlmArgs,
    },
    /// Train a projection head on a classes file.
    Finetune {
        #[arg(long)]
        classes: PathBuf,
        /// Head file output.
        #[arg(long)]
        out: PathBuf,
        /// Training report JSON output (default: stdout).
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        margin: Option<f64>,
        /// Classes per batch.
        #[arg(long)]
        batch_classes: Option<usize>,
        /// Members per class in a batch.
        #[arg(long)]
        batch_members: Option<usize>,
        #[arg(long)]
        validation_fraction: Option<f64>,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Run an experiment grid.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        /// Output directory (checkpoint and result tables).
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        llm: LlmArgs,
    },
}

#[derive(Args, Default)]
struct LlmArgs {
    /// Chat-completion endpoint URL.
    #[arg(long)]
    llm_endpoint: Option<String>,
    #[arg(long)]
    llm_model: Option<String>,
    #[arg(long)]
    llm_temperature: Option<f64>,
    /// Candidates sent to the LLM per source column.
    #[arg(long)]
    llm_top_k: Option<usize>,
    #[arg(long)]
    llm_max_concurrent: Option<usize>,
    #[arg(long)]
    llm_timeout: Option<u64>,
    /// Answer LLM prompts from a recorded transcript instead of the network.
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Append every LLM exchange to a transcript file.
    #[arg(long, conflicts_with = "replay")]
    record: Option<PathBuf>,
}

impl LlmArgs {
    fn apply(&self, cfg: &mut LlmConfig) {
        if let Some(v) = &self.llm_endpoint {
            cfg.endpoint = Some(v.clone());
        }
        if let Some(v) = &self.llm_model {
            cfg.model = v.clone();
        }
        if let Some(v) = self.llm_temperature {
            cfg.temperature = v;
        }
        if let Some(v) = self.llm_top_k {
            cfg.top_k = v;
        }
        if let Some(v) = self.llm_max_concurrent {
            cfg.max_concurrent = v;
        }
        if let Some(v) = self.llm_timeout {
            cfg.timeout_secs = v;
        }
    }

    /// Replay beats the network; `None` only when neither is configured.
    fn client(&self, cfg: &LlmConfig) -> Result<Option<Arc<dyn ChatClient>>> {
        if let Some(path) = &self.replay {
            return Ok(Some(Arc::new(ReplayChatClient::load(path)?)));
        }
        if cfg.endpoint.as_deref().unwrap_or("").is_empty() {
            return Ok(None);
        }
        let http = HttpChatClient::from_env(cfg)?;
        Ok(Some(match &self.record {
            Some(path) => Arc::new(RecordingChatClient::new(http, path)?),
            None => Arc::new(http),
        }))
    }
}

#[derive(Args, Default)]
struct PipelineArgs {
    /// Pipeline configuration JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["zs-bp", "ft-bp", "zs-llm", "ft-llm"])]
    preset: Option<String>,
    /// priority, coordinated, weighted, frequency or random.
    #[arg(long)]
    sampling: Option<String>,
    #[arg(long)]
    sample_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// default, verbose, repeat or header-only.
    #[arg(long)]
    serialization: Option<String>,
    #[arg(long)]
    repeat_k: Option<usize>,
    /// hash or remote.
    #[arg(long)]
    embedder: Option<String>,
    #[arg(long)]
    dimension: Option<usize>,
    /// Remote embedding service base URL.
    #[arg(long)]
    embed_endpoint: Option<String>,
    #[arg(long)]
    embed_batch_size: Option<usize>,
    /// Embedding cache file.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Serve embeddings from the cache only.
    #[arg(long)]
    offline: bool,
    /// Candidates kept per source column.
    #[arg(long)]
    k: Option<usize>,
    /// none, bipartite or llm.
    #[arg(long)]
    reranker: Option<String>,
    /// Projection head file applied to all embeddings.
    #[arg(long)]
    projection: Option<PathBuf>,
    #[command(flatten)]
    llm: LlmArgs,
}

impl PipelineArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
                PipelineConfig::from_json(&bytes)?
            }
            None => PipelineConfig::default(),
        };
        if let Some(v) = &self.sampling {
            cfg.sampler.strategy = v.parse::<Strategy>()?;
        }
        if let Some(v) = self.sample_size {
            cfg.sampler.sample_size = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.serialization {
            cfg.serialization.format = v.parse::<Format>()?;
        }
        if let Some(v) = self.repeat_k {
            cfg.serialization.repeat_k = v;
        }
        if let Some(v) = &self.embedder {
            cfg.embedding.kind = match v.as_str() {
                "hash" => ProviderKind::Hash,
                "remote" => ProviderKind::Remote,
                other => bail!("unknown embedder {other:?} (expected hash or remote)"),
            };
        }
        if let Some(v) = self.dimension {
            cfg.embedding.dimension = v;
        }
        if let Some(v) = &self.embed_endpoint {
            cfg.embedding.endpoint = Some(v.clone());
        }
        if let Some(v) = self.embed_batch_size {
            cfg.embedding.batch_size = v;
        }
        if let Some(v) = &self.cache {
            cfg.embedding.cache_path = Some(v.clone());
        }
        if self.offline {
            cfg.embedding.offline = true;
        }
        if let Some(v) = self.k {
            cfg.k = v;
        }
        if let Some(v) = &self.reranker {
            cfg.reranker = v.parse::<Reranker>()?;
        }
        if let Some(v) = &self.projection {
            cfg.projection = Some(v.clone());
        }
        self.llm.apply(&mut cfg.llm);
        if let Some(p) = &self.preset {
            p.parse::<Preset>()?.apply(&mut cfg)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn pipeline(&self) -> Result<Pipeline> {
        let cfg = self.resolve()?;
        let chat = if cfg.reranker == Reranker::Llm {
            self.llm.client(&cfg.llm)?.map(|c| Box::new(c) as Box<dyn ChatClient>)
        } else {
            None
        };
        Ok(Pipeline::new(cfg, chat)?)
    }
}

fn table_name(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "table".to_string(), |s| s.to_string_lossy().into_owned())
}

fn load(path: &Path) -> Result<Table> {
    Ok(load_table(path, &table_name(path))?)
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            bail!("--workers must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Match { source, target, out, csv, pipeline } => {
            let p = pipeline.pipeline()?;
            let list = p.run_match(&load(&source)?, &load(&target)?)?;
            let json = list.to_json() + "\n";
            match out {
                Some(path) => write(&path, json)?,
                None => print!("{json}"),
            }
            if let Some(path) = csv {
                write(&path, list.to_csv())?;
            }
        }
        Command::Evaluate { source, target, ground_truth, report, pipeline } => {
            let p = pipeline.pipeline()?;
            let gt = load_ground_truth(&ground_truth)?;
            let r = p.evaluate(&load(&source)?, &load(&target)?, &gt)?;
            print!("{}", r.to_table());
            if let Some(path) = report {
                write(&path, r.to_json() + "\n")?;
            }
        }
        Command::Augment { target, out, no_llm, n_structural, n_semantic, seed, llm } => {
            let mut llm_cfg = LlmConfig::default();
            llm.apply(&mut llm_cfg);
            let client = if no_llm {
                None
            } else {
                Some(llm.client(&llm_cfg)?.context("llm endpoint required (or pass --no-llm)")?)
            };
            let cfg = AugmentConfig { n_structural, n_semantic, seed, max_concurrent: llm_cfg.max_concurrent };
            let (classes, warnings) = build_classes(&load(&target)?, &cfg, client.as_deref())?;
            if !no_llm {
                for w in &warnings {
                    log::warn!("{w}");
                }
            }
            write(&out, write_classes(&classes))?;
            eprintln!("wrote {} classes to {}", classes.len(), out.display());
        }
        Command::Finetune {
            classes,
            out,
            report,
            epochs,
            learning_rate,
            margin,
            batch_classes,
            batch_members,
            validation_fraction,
            pipeline,
        } => {
            let pcfg = pipeline.resolve()?;
            let mut cfg = TrainConfig {
                seed: pcfg.seed,
                sampler: pcfg.effective_sampler(),
                serialization: pcfg.serialization,
                ..TrainConfig::default()
            };
            if let Some(v) = epochs {
                cfg.epochs = v;
            }
            if let Some(v) = learning_rate {
                cfg.learning_rate = v;
            }
            if let Some(v) = margin {
                cfg.margin = v;
            }
            if let Some(v) = batch_classes {
                cfg.batch_classes = v;
            }
            if let Some(v) = batch_members {
                cfg.batch_members = v;
            }
            if let Some(v) = validation_fraction {
                cfg.validation_fraction = v;
            }
            let classes = load_classes(&classes)?;
            let embedder = Embedder::from_config(&pcfg.embedding)?;
            let (head, r) = train(&classes, &embedder, &cfg)?;
            head.save(&out)?;
            let json = serde_json::to_string_pretty(&r)? + "\n";
            match report {
                Some(path) => write(&path, json)?,
                None => print!("{json}"),
            }
        }
        Command::Ablate { grid, out, llm } => {
            let mut g = ExperimentGrid::load(&grid)?;
            llm.apply(&mut g.base.llm);
            let client = llm.client(&g.base.llm)?;
            let workers = cli.workers.unwrap_or_else(rayon::current_num_threads);
            let result = run_grid(&g, &out, client, workers)?;
            print!("{}", result.to_table());
        }
    }
    Ok(())
}

/// 2 for provider or endpoint failures, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<colmatch::Error>() {
        Some(e) if e.is_provider_failure() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
