//! HTTP embedding provider.
//!
//! `POST <endpoint>/embed` with `{"texts": [...]}`; the service answers
//! `{"dimension": D, "vectors": [[...], ...]}` order-aligned with the texts,
//! one pooled vector per text.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{EmbeddingProvider, EmbeddingVector};
use crate::error::{Error, Result};

pub const RETRY_ATTEMPTS: u32 = 3;

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    dimension: usize,
    vectors: Vec<Vec<f64>>,
}

/// Decodes and validates a response body, normalizing every vector.
pub fn decode_embed_response(bytes: &[u8], expected_len: usize, expected_dim: usize) -> Result<Vec<EmbeddingVector>> {
    let resp: EmbedResponse = serde_json::from_slice(bytes)
        .map_err(|e| Error::format("embed response", e.to_string()))?;
    if resp.dimension != expected_dim {
        return Err(Error::DimensionMismatch {
            expected: expected_dim,
            actual: resp.dimension,
        });
    }
    if resp.vectors.len() != expected_len {
        return Err(Error::format(
            "embed response",
            format!("expected {expected_len} vectors, got {}", resp.vectors.len()),
        ));
    }
    resp.vectors
        .iter()
        .map(|v| {
            if v.len() != expected_dim {
                return Err(Error::DimensionMismatch {
                    expected: expected_dim,
                    actual: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::format("embed response", "non-finite component"));
            }
            Ok(EmbeddingVector::from_raw(v))
        })
        .collect()
}

pub struct RemoteEmbedder {
    endpoint: String,
    url: String,
    dim: usize,
    backoff: Duration,
    client: reqwest::blocking::Client,
}

impl RemoteEmbedder {
    pub fn new(endpoint: &str, dim: usize, backoff: Duration, timeout: Duration) -> Result<Self> {
        let trimmed = endpoint.trim_end_matches('/');
        let url = if trimmed.ends_with("/embed") {
            trimmed.to_string()
        } else {
            format!("{trimmed}/embed")
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Provider {
                endpoint: endpoint.to_string(),
                message: e.to_string(),
            })?;
        Ok(RemoteEmbedder {
            endpoint: endpoint.to_string(),
            url,
            dim,
            backoff,
            client,
        })
    }

    fn attempt(&self, texts: &[String]) -> std::result::Result<Vec<u8>, String> {
        let resp = self
            .client
            .post(&self.url)
            .json(&EmbedRequest { texts })
            .send()
            .map_err(|e| e.to_string())?;
        let status = resp.status();
        let body = resp.bytes().map_err(|e| e.to_string())?;
        if !status.is_success() {
            return Err(format!("HTTP {status}"));
        }
        Ok(body.to_vec())
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn id(&self) -> String {
        format!("remote:{}", self.endpoint)
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let mut last = String::new();
        for attempt in 0..RETRY_ATTEMPTS {
            if attempt > 0 {
                std::thread::sleep(self.backoff * 2u32.pow(attempt - 1));
            }
            match self.attempt(texts) {
                // A well-formed answer with the wrong shape is not retried.
                Ok(body) => return decode_embed_response(&body, texts.len(), self.dim),
                Err(e) => {
                    log::warn!("embedding request to {} failed (attempt {}): {e}", self.endpoint, attempt + 1);
                    last = e;
                }
            }
        }
        Err(Error::Provider {
            endpoint: self.endpoint.clone(),
            message: format!("unreachable after {RETRY_ATTEMPTS} attempts: {last}"),
        })
    }
}
