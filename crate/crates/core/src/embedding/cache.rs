//! Append-only embedding cache.
//!
//! One record per line: `hex(sha256(provider_id ‖ 0x00 ‖ text))`, two
//! spaces, then base64 of the vector's little-endian `f32` components.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use sha2::{Digest, Sha256};

use super::EmbeddingVector;
use crate::error::{Error, Result};

const FIELD_SEP: &str = "  ";

pub fn cache_key(provider_id: &str, text: &str) -> String {
    let mut h = Sha256::new();
    h.update(provider_id.as_bytes());
    h.update([0u8]);
    h.update(text.as_bytes());
    hex::encode(h.finalize())
}

pub fn encode_cache_line(key: &str, vector: &EmbeddingVector) -> String {
    let bytes: Vec<u8> = vector.as_slice().iter().flat_map(|x| x.to_le_bytes()).collect();
    format!("{key}{FIELD_SEP}{}", STANDARD.encode(bytes))
}

/// Decodes a cache file body into `(key, components)` records.
pub fn decode_cache(bytes: &[u8]) -> Result<Vec<(String, Vec<f32>)>> {
    const CTX: &str = "embedding cache";
    let text = std::str::from_utf8(bytes).map_err(|_| Error::Encoding {
        context: CTX.to_string(),
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::format(CTX, format!("line {}: {msg}", i + 1));
        let (key, payload) = line.split_once(FIELD_SEP).ok_or_else(|| bad("missing separator"))?;
        if key.len() != 64 || !key.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return Err(bad("key is not a 64-digit lowercase hex digest"));
        }
        let raw = STANDARD.decode(payload).map_err(|_| bad("invalid base64 payload"))?;
        if raw.is_empty() || raw.len() % 4 != 0 {
            return Err(bad("payload is not a whole number of f32 values"));
        }
        let v: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(bad("non-finite component"));
        }
        out.push((key.to_string(), v));
    }
    Ok(out)
}

struct State {
    entries: HashMap<String, Vec<f32>>,
    file: Option<File>,
}

/// In-memory view of a cache file; new entries are appended under a lock.
pub struct EmbeddingCache {
    path: Option<PathBuf>,
    state: Mutex<State>,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        EmbeddingCache {
            path: None,
            state: Mutex::new(State {
                entries: HashMap::new(),
                file: None,
            }),
        }
    }

    /// Loads `path` if it exists; later inserts append to it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut entries = HashMap::new();
        match std::fs::read(path) {
            Ok(bytes) => {
                for (k, v) in decode_cache(&bytes).map_err(|e| match e {
                    Error::Format { message, .. } => Error::format(path.display().to_string(), message),
                    other => other,
                })? {
                    entries.insert(k, v);
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(Error::io(path, e)),
        }
        Ok(EmbeddingCache {
            path: Some(path.to_path_buf()),
            state: Mutex::new(State { entries, file: None }),
        })
    }

    pub fn len(&self) -> usize {
        self.state.lock().expect("cache lock").entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, provider_id: &str, text: &str) -> Option<EmbeddingVector> {
        let key = cache_key(provider_id, text);
        let state = self.state.lock().expect("cache lock");
        state.entries.get(&key).cloned().map(EmbeddingVector::from_stored)
    }

    pub fn insert_many<'a>(
        &self,
        provider_id: &str,
        items: impl IntoIterator<Item = (&'a str, &'a EmbeddingVector)>,
    ) -> Result<()> {
        let mut state = self.state.lock().expect("cache lock");
        let mut lines = String::new();
        for (text, v) in items {
            let key = cache_key(provider_id, text);
            if state.entries.contains_key(&key) {
                continue;
            }
            lines.push_str(&encode_cache_line(&key, v));
            lines.push('\n');
            state.entries.insert(key, v.as_slice().to_vec());
        }
        if lines.is_empty() {
            return Ok(());
        }
        if let Some(path) = &self.path {
            if state.file.is_none() {
                let f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| Error::io(path, e))?;
                state.file = Some(f);
            }
            let file = state.file.as_mut().expect("opened above");
            file.write_all(lines.as_bytes()).map_err(|e| Error::io(path, e))?;
            file.flush().map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_round_trip() {
        let v = EmbeddingVector::from_raw(&[0.6, -0.8, 0.0]);
        let key = cache_key("p", "text");
        let line = encode_cache_line(&key, &v);
        assert_eq!(line.split(FIELD_SEP).count(), 2);
        let decoded = decode_cache(line.as_bytes()).unwrap();
        assert_eq!(decoded, vec![(key, v.as_slice().to_vec())]);
    }

    #[test]
    fn keys_depend_on_provider() {
        assert_ne!(cache_key("a", "t"), cache_key("b", "t"));
        assert_ne!(cache_key("a", "t"), cache_key("at", ""));
    }

    #[test]
    fn rejects_malformed_records() {
        let key = cache_key("p", "t");
        for bad in [
            "nokey".to_string(),
            format!("{key} AAAA"),
            format!("{}  AAAAAA==", &key[..10]),
            format!("{key}  !!!"),
            format!("{key}  AAA="),
            format!("{key}  AACAfw=="), // +inf
        ] {
            assert!(decode_cache(bad.as_bytes()).is_err(), "{bad}");
        }
    }

    #[test]
    fn appends_only_new_entries() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c");
        let cache = EmbeddingCache::open(&path).unwrap();
        let v = EmbeddingVector::from_raw(&[1.0, 2.0]);
        cache.insert_many("p", [("x", &v), ("x", &v)]).unwrap();
        cache.insert_many("p", [("x", &v)]).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        assert_eq!(body.lines().count(), 1);
        assert_eq!(EmbeddingCache::open(&path).unwrap().get("p", "x"), Some(v));
    }
}
