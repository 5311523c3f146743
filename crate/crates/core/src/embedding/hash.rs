use super::{EmbeddingProvider, EmbeddingVector};
use crate::error::Result;
use crate::hashing::{fnv1a64_seeded, mix64};

const BUCKET_SEED: u64 = 0;
const SIGN_SEED: u64 = 0x5167_6e5f_7365_6564;
const PAD_START: char = '\x01';
const PAD_END: char = '\x02';

/// Character trigrams of the lowercased text, stride 1. Texts of one or two
/// characters are padded to exactly three with sentinel characters; the empty
/// text has no trigrams.
pub fn trigrams(text: &str) -> Vec<String> {
    let mut chars: Vec<char> = text.to_lowercase().chars().collect();
    match chars.len() {
        0 => return Vec::new(),
        1 => {
            chars.insert(0, PAD_START);
            chars.push(PAD_END);
        }
        2 => chars.push(PAD_END),
        _ => {}
    }
    chars.windows(3).map(|w| w.iter().collect()).collect()
}

/// Signed feature hashing of character trigrams into `dim` buckets.
pub fn hash_embed(text: &str, dim: usize) -> EmbeddingVector {
    assert!(dim >= 2, "hash embedding dimension must be at least 2");
    let mut acc = vec![0.0f64; dim];
    for g in trigrams(text) {
        let bucket = mix64(fnv1a64_seeded(BUCKET_SEED, g.as_bytes())) % dim as u64;
        let sign = if mix64(fnv1a64_seeded(SIGN_SEED, g.as_bytes())).is_multiple_of(2) {
            1.0
        } else {
            -1.0
        };
        acc[bucket as usize] += sign;
    }
    EmbeddingVector::from_raw(&acc)
}

#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        HashEmbedder { dim }
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn id(&self) -> String {
        format!("hash-trigram:{}", self.dim)
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        Ok(texts.iter().map(|t| hash_embed(t, self.dim)).collect())
    }
}
