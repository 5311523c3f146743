//! End-to-end matching: profile and serialize both tables, embed, retrieve
//! top-k candidates, pin exact-name matches, then rerank.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bipartite::rerank_bipartite;
use crate::embedding::{Embedder, EmbeddingProviderConfig, EmbeddingVector};
use crate::error::{Error, Result};
use crate::finetune::ProjectionHead;
use crate::llm::{ChatClient, HttpChatClient, LlmConfig};
use crate::llm_rerank::rerank_llm;
use crate::metrics::EvalReport;
use crate::retrieval::{exact_name_override, retrieve_from_vectors, MatchList, DEFAULT_K};
use crate::sampling::SamplerConfig;
use crate::serialize::{SerializationConfig, SerializedColumn};
use crate::table::{GroundTruth, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Reranker {
    None,
    #[default]
    Bipartite,
    Llm,
}

impl Reranker {
    pub const ALL: [Reranker; 3] = [Reranker::None, Reranker::Bipartite, Reranker::Llm];

    pub fn as_str(self) -> &'static str {
        match self {
            Reranker::None => "none",
            Reranker::Bipartite => "bipartite",
            Reranker::Llm => "llm",
        }
    }
}

impl fmt::Display for Reranker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Reranker {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Reranker::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown reranker {s:?} (expected none, bipartite or llm)")))
    }
}

/// The four standard variants: zero-shot or fine-tuned embeddings, each with
/// the bipartite or the LLM reranker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    ZsBp,
    FtBp,
    ZsLlm,
    FtLlm,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::ZsBp, Preset::FtBp, Preset::ZsLlm, Preset::FtLlm];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::ZsBp => "zs-bp",
            Preset::FtBp => "ft-bp",
            Preset::ZsLlm => "zs-llm",
            Preset::FtLlm => "ft-llm",
        }
    }

    pub fn reranker(self) -> Reranker {
        match self {
            Preset::ZsBp | Preset::FtBp => Reranker::Bipartite,
            Preset::ZsLlm | Preset::FtLlm => Reranker::Llm,
        }
    }

    pub fn fine_tuned(self) -> bool {
        matches!(self, Preset::FtBp | Preset::FtLlm)
    }

    /// Sets the reranker; fine-tuned presets need a projection head and
    /// zero-shot presets drop any.
    pub fn apply(self, config: &mut PipelineConfig) -> Result<()> {
        config.reranker = self.reranker();
        if self.fine_tuned() {
            if config.projection.is_none() {
                return Err(Error::Config(format!("preset {} requires a projection head", self.as_str())));
            }
        } else {
            config.projection = None;
        }
        Ok(())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset {s:?} (expected zs-bp, ft-bp, zs-llm or ft-llm)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// The sampler's own seed is replaced by [`PipelineConfig::seed`].
    pub sampler: SamplerConfig,
    pub serialization: SerializationConfig,
    pub embedding: EmbeddingProviderConfig,
    pub k: usize,
    pub reranker: Reranker,
    pub projection: Option<PathBuf>,
    pub llm: LlmConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            sampler: SamplerConfig::default(),
            serialization: SerializationConfig::default(),
            embedding: EmbeddingProviderConfig::default(),
            k: DEFAULT_K,
            reranker: Reranker::default(),
            projection: None,
            llm: LlmConfig::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        self.sampler.validate()?;
        self.serialization.validate()?;
        self.embedding.validate()?;
        self.llm.validate()
    }

    pub fn effective_sampler(&self) -> SamplerConfig {
        SamplerConfig {
            seed: self.seed,
            ..self.sampler
        }
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| Error::format("pipeline config", e.to_string()))
    }
}

/// A configured pipeline with its embedder, optional head and chat client.
pub struct Pipeline {
    config: PipelineConfig,
    embedder: Embedder,
    head: Option<ProjectionHead>,
    chat: Option<Box<dyn ChatClient>>,
}

impl Pipeline {
    /// Builds every component from `config`. The LLM reranker gets an HTTP
    /// client unless `chat` supplies one (e.g. a transcript replay).
    pub fn new(config: PipelineConfig, chat: Option<Box<dyn ChatClient>>) -> Result<Self> {
        config.validate()?;
        let embedder = Embedder::from_config(&config.embedding)?;
        Self::with_embedder(config, embedder, chat)
    }

    pub fn with_embedder(config: PipelineConfig, embedder: Embedder, chat: Option<Box<dyn ChatClient>>) -> Result<Self> {
        config.validate()?;
        let head = config.projection.as_ref().map(ProjectionHead::load).transpose()?;
        if let Some(h) = &head {
            if h.dim != embedder.dimension() {
                return Err(Error::DimensionMismatch { expected: embedder.dimension(), actual: h.dim });
            }
        }
        let chat = match (config.reranker, chat) {
            (Reranker::Llm, None) => Some(Box::new(HttpChatClient::from_env(&config.llm)?) as Box<dyn ChatClient>),
            (_, chat) => chat,
        };
        Ok(Pipeline { config, embedder, head, chat })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn serialize_table(&self, table: &Table) -> Vec<SerializedColumn> {
        let sampler = self.config.effective_sampler();
        table.columns().iter().map(|c| SerializedColumn::from_column(c, &sampler)).collect()
    }

    fn embed(&self, columns: &[SerializedColumn]) -> Result<Vec<(String, EmbeddingVector)>> {
        let texts: Vec<String> = columns.iter().map(|c| c.render(&self.config.serialization)).collect();
        let vectors = self.embedder.embed_batch(&texts)?;
        columns
            .iter()
            .zip(vectors)
            .map(|(c, v)| {
                let v = match &self.head {
                    Some(h) => h.apply(&v)?,
                    None => v,
                };
                Ok((c.name.clone(), v))
            })
            .collect()
    }

    pub fn run_match(&self, source: &Table, target: &Table) -> Result<MatchList> {
        let src = self.serialize_table(source);
        let tgt = self.serialize_table(target);
        let sv = self.embed(&src)?;
        let tv = self.embed(&tgt)?;
        let list = retrieve_from_vectors(&source.name, &target.name, &sv, &tv, self.config.k);
        let list = exact_name_override(list, source, target);
        match self.config.reranker {
            Reranker::None => Ok(list),
            Reranker::Bipartite => Ok(rerank_bipartite(list)),
            Reranker::Llm => {
                let chat = self
                    .chat
                    .as_deref()
                    .ok_or_else(|| Error::Config("llm endpoint required".into()))?;
                rerank_llm(&list, &src, &tgt, chat, &self.config.llm)
            }
        }
    }

    /// Runs the pipeline, timing it, and scores the result against `gt`.
    pub fn evaluate(&self, source: &Table, target: &Table, gt: &GroundTruth) -> Result<EvalReport> {
        let start = Instant::now();
        let list = self.run_match(source, target)?;
        let runtime = start.elapsed().as_secs_f64();
        let echo = serde_json::to_value(&self.config).expect("config serializes");
        EvalReport::new(&list, gt, runtime, echo)
    }
}
