//! Column embeddings: unit-norm vectors produced by a pluggable provider.
//!
//! [`Embedder`] wraps a provider with batching, de-duplication and an
//! optional on-disk cache. The built-in [`HashEmbedder`] is deterministic and
//! needs no network; [`RemoteEmbedder`] talks to an HTTP service.

mod cache;
mod hash;
mod remote;

use std::collections::{HashMap, HashSet};
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cache::{decode_cache, encode_cache_line, EmbeddingCache};
pub use hash::{hash_embed, trigrams, HashEmbedder};
pub use remote::{decode_embed_response, RemoteEmbedder, RETRY_ATTEMPTS};

pub const DEFAULT_DIMENSION: usize = 256;
pub const DEFAULT_BATCH_SIZE: usize = 32;

/// A unit-norm embedding; inputs with no signal map to the basis vector `e_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    /// L2-normalizes `raw`; an all-zero (or empty-norm) input maps to `e_0`.
    pub fn from_raw(raw: &[f64]) -> Self {
        assert!(!raw.is_empty(), "embedding dimension must be positive");
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Self::basis(raw.len());
        }
        EmbeddingVector(raw.iter().map(|x| (x / norm) as f32).collect())
    }

    pub fn basis(dim: usize) -> Self {
        let mut v = vec![0.0f32; dim];
        v[0] = 1.0;
        EmbeddingVector(v)
    }

    /// Wraps stored components without renormalizing (cache loads).
    pub(crate) fn from_stored(v: Vec<f32>) -> Self {
        EmbeddingVector(v)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&x| f64::from(x)).collect()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum()
    }

    /// Cosine similarity, clamped to `[-1, 1]`.
    pub fn cosine(&self, other: &Self) -> f64 {
        let denom = self.norm() * other.norm();
        if denom == 0.0 {
            return 0.0;
        }
        (self.dot(other) / denom).clamp(-1.0, 1.0)
    }
}

pub trait EmbeddingProvider: Send + Sync {
    /// Stable identifier used to key cache entries.
    fn id(&self) -> String;
    fn dimension(&self) -> usize;
    /// Embeds one batch; output is order-aligned with `texts`.
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Hash,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingProviderConfig {
    pub kind: ProviderKind,
    pub dimension: usize,
    pub endpoint: Option<String>,
    pub batch_size: usize,
    pub cache_path: Option<PathBuf>,
    /// Serve only from the cache; a miss is an error instead of a request.
    pub offline: bool,
    /// Base delay of the exponential backoff between remote attempts.
    pub retry_backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for EmbeddingProviderConfig {
    fn default() -> Self {
        EmbeddingProviderConfig {
            kind: ProviderKind::Hash,
            dimension: DEFAULT_DIMENSION,
            endpoint: None,
            batch_size: DEFAULT_BATCH_SIZE,
            cache_path: None,
            offline: false,
            retry_backoff_ms: 200,
            timeout_secs: 60,
        }
    }
}

impl EmbeddingProviderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.kind == ProviderKind::Hash && self.dimension < 2 {
            return Err(Error::Config("hash embedder dimension must be at least 2".into()));
        }
        if self.kind == ProviderKind::Remote && self.endpoint.as_deref().unwrap_or("").is_empty() {
            return Err(Error::Config("remote embedder requires an endpoint".into()));
        }
        Ok(())
    }
}

pub struct Embedder {
    provider: Box<dyn EmbeddingProvider>,
    cache: Option<EmbeddingCache>,
    batch_size: usize,
    offline: bool,
}

impl Embedder {
    pub fn new(provider: Box<dyn EmbeddingProvider>, batch_size: usize) -> Self {
        Embedder {
            provider,
            cache: None,
            batch_size: batch_size.max(1),
            offline: false,
        }
    }

    pub fn from_config(config: &EmbeddingProviderConfig) -> Result<Self> {
        config.validate()?;
        let provider: Box<dyn EmbeddingProvider> = match config.kind {
            ProviderKind::Hash => Box::new(HashEmbedder::new(config.dimension)),
            ProviderKind::Remote => Box::new(RemoteEmbedder::new(
                config.endpoint.as_deref().unwrap_or_default(),
                config.dimension,
                std::time::Duration::from_millis(config.retry_backoff_ms),
                std::time::Duration::from_secs(config.timeout_secs.max(1)),
            )?),
        };
        let mut embedder = Embedder::new(provider, config.batch_size);
        if let Some(path) = &config.cache_path {
            embedder.cache = Some(EmbeddingCache::open(path)?);
        }
        embedder.offline = config.offline;
        Ok(embedder)
    }

    pub fn with_cache(mut self, cache: EmbeddingCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn offline(mut self, offline: bool) -> Self {
        self.offline = offline;
        self
    }

    pub fn provider_id(&self) -> String {
        self.provider.id()
    }

    pub fn dimension(&self) -> usize {
        self.provider.dimension()
    }

    /// Embeds `texts`, order-aligned. Each distinct text is computed once;
    /// cached texts are not sent to the provider.
    pub fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let provider_id = self.provider.id();
        let dim = self.provider.dimension();
        let mut resolved: HashMap<&str, EmbeddingVector> = HashMap::new();
        let mut pending: Vec<&str> = Vec::new();
        let mut queued: HashSet<&str> = HashSet::new();
        for text in texts {
            let text = text.as_str();
            if resolved.contains_key(text) || queued.contains(text) {
                continue;
            }
            let hit = match &self.cache {
                Some(cache) => cache.get(&provider_id, text),
                None => None,
            };
            match hit {
                Some(v) if v.dim() != dim => {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        actual: v.dim(),
                    })
                }
                Some(v) => {
                    resolved.insert(text, v);
                }
                None => {
                    queued.insert(text);
                    pending.push(text);
                }
            }
        }
        if !pending.is_empty() && self.offline {
            return Err(Error::Provider {
                endpoint: provider_id,
                message: format!("offline mode: {} text(s) missing from the cache", pending.len()),
            });
        }
        let computed: Vec<Vec<EmbeddingVector>> = pending
            .par_chunks(self.batch_size)
            .map(|chunk| {
                let chunk: Vec<String> = chunk.iter().map(|t| t.to_string()).collect();
                let out = self.provider.embed(&chunk)?;
                if out.len() != chunk.len() {
                    return Err(Error::Provider {
                        endpoint: self.provider.id(),
                        message: format!("expected {} vectors, got {}", chunk.len(), out.len()),
                    });
                }
                if let Some(bad) = out.iter().find(|v| v.dim() != dim) {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        actual: bad.dim(),
                    });
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        let computed: Vec<EmbeddingVector> = computed.into_iter().flatten().collect();
        if let Some(cache) = &self.cache {
            cache.insert_many(&provider_id, pending.iter().copied().zip(&computed))?;
        }
        resolved.extend(pending.into_iter().zip(computed));
        Ok(texts.iter().map(|t| resolved[t.as_str()].clone()).collect())
    }
}

/// Convenience wrapper building an [`Embedder`] from `config` for one call.
pub fn embed_batch(texts: &[String], config: &EmbeddingProviderConfig) -> Result<Vec<EmbeddingVector>> {
    Embedder::from_config(config)?.embed_batch(texts)
}
