//! Chat-completion clients.
//!
//! The wire format is the common chat-completion shape: a JSON body with
//! `model`, `temperature` and a single user message; the first choice's
//! message content is the answer. Transcripts of prompt/response pairs can be
//! recorded and replayed for offline, deterministic runs.

use std::collections::{HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attempts per request before falling back.
pub const MAX_ATTEMPTS: u32 = 3;
pub const API_KEY_ENV: &str = "LLM_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub endpoint: Option<String>,
    pub model: String,
    pub temperature: f64,
    pub timeout_secs: u64,
    pub max_concurrent: usize,
    /// Candidates sent per source column.
    pub top_k: usize,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            endpoint: None,
            model: "gpt-4o-mini".to_string(),
            temperature: 0.0,
            timeout_secs: 60,
            max_concurrent: 4,
            top_k: 20,
        }
    }
}

impl LlmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::Config("temperature must be non-negative".into()));
        }
        if self.max_concurrent == 0 || self.top_k == 0 {
            return Err(Error::Config("llm concurrency and top-k must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct ChatError(pub String);

pub trait ChatClient: Send + Sync {
    fn complete(&self, prompt: &str) -> std::result::Result<String, ChatError>;
}

impl<C: ChatClient + ?Sized> ChatClient for &C {
    fn complete(&self, prompt: &str) -> std::result::Result<String, ChatError> {
        (**self).complete(prompt)
    }
}

impl<C: ChatClient + ?Sized> ChatClient for std::sync::Arc<C> {
    fn complete(&self, prompt: &str) -> std::result::Result<String, ChatError> {
        (**self).complete(prompt)
    }
}

impl<C: ChatClient + ?Sized> ChatClient for Box<C> {
    fn complete(&self, prompt: &str) -> std::result::Result<String, ChatError> {
        (**self).complete(prompt)
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    temperature: f64,
    messages: [ChatMessage<'a>; 1],
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    content: Option<String>,
}

/// Extracts the first choice's message content from a response body.
pub fn decode_chat_response(bytes: &[u8]) -> std::result::Result<String, ChatError> {
    let resp: ChatResponse =
        serde_json::from_slice(bytes).map_err(|e| ChatError(format!("malformed response: {e}")))?;
    resp.choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| ChatError("response has no message content".into()))
}

pub struct HttpChatClient {
    endpoint: String,
    model: String,
    temperature: f64,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpChatClient {
    pub fn new(config: &LlmConfig, api_key: Option<String>) -> Result<Self> {
        let endpoint = config
            .endpoint
            .clone()
            .filter(|e| !e.is_empty())
            .ok_or_else(|| Error::Config("llm endpoint required".into()))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs.max(1)))
            .build()
            .map_err(|e| Error::Provider {
                endpoint: endpoint.clone(),
                message: e.to_string(),
            })?;
        Ok(HttpChatClient {
            endpoint,
            model: config.model.clone(),
            temperature: config.temperature,
            api_key,
            client,
        })
    }

    /// Like [`HttpChatClient::new`], reading the key from `LLM_API_KEY`.
    pub fn from_env(config: &LlmConfig) -> Result<Self> {
        Self::new(config, std::env::var(API_KEY_ENV).ok())
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, prompt: &str) -> std::result::Result<String, ChatError> {
        log::debug!("llm request to {}: ~{} prompt tokens", self.endpoint, prompt.len().div_ceil(4));
        let body = ChatRequest {
            model: &self.model,
            temperature: self.temperature,
            messages: [ChatMessage {
                role: "user",
                content: prompt,
            }],
        };
        let mut req = self.client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| ChatError(e.to_string()))?;
        let status = resp.status();
        let bytes = resp.bytes().map_err(|e| ChatError(e.to_string()))?;
        if !status.is_success() {
            return Err(ChatError(format!("HTTP {status}")));
        }
        decode_chat_response(&bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub prompt: String,
    pub response: String,
}

/// Parses a JSON-lines transcript of `{prompt, response}` records.
pub fn parse_transcript(bytes: &[u8]) -> Result<Vec<TranscriptEntry>> {
    const CTX: &str = "transcript";
    let text = std::str::from_utf8(bytes).map_err(|_| Error::Encoding {
        context: CTX.to_string(),
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::format(CTX, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// Serves recorded responses; repeated prompts are answered in recording
/// order, and an unrecorded prompt is a transport error.
pub struct ReplayChatClient {
    responses: Mutex<HashMap<String, VecDeque<String>>>,
}

impl ReplayChatClient {
    pub fn new(entries: impl IntoIterator<Item = TranscriptEntry>) -> Self {
        let mut responses: HashMap<String, VecDeque<String>> = HashMap::new();
        for e in entries {
            responses.entry(e.prompt).or_default().push_back(e.response);
        }
        ReplayChatClient {
            responses: Mutex::new(responses),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::new(parse_transcript(&bytes)?))
    }
}

impl ChatClient for ReplayChatClient {
    fn complete(&self, prompt: &str) -> std::result::Result<String, ChatError> {
        let mut map = self.responses.lock().expect("replay lock");
        map.get_mut(prompt)
            .and_then(VecDeque::pop_front)
            .ok_or_else(|| ChatError("prompt not found in replay transcript".into()))
    }
}

/// Forwards to `inner` and appends every successful exchange to a transcript.
pub struct RecordingChatClient<C> {
    inner: C,
    file: Mutex<File>,
}

impl<C: ChatClient> RecordingChatClient<C> {
    pub fn new(inner: C, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(RecordingChatClient {
            inner,
            file: Mutex::new(file),
        })
    }
}

impl<C: ChatClient> ChatClient for RecordingChatClient<C> {
    fn complete(&self, prompt: &str) -> std::result::Result<String, ChatError> {
        let response = self.inner.complete(prompt)?;
        let entry = TranscriptEntry {
            prompt: prompt.to_string(),
            response: response.clone(),
        };
        let mut line = serde_json::to_string(&entry).expect("transcript entry serializes");
        line.push('\n');
        let mut file = self.file.lock().expect("transcript lock");
        if let Err(e) = file.write_all(line.as_bytes()) {
            log::warn!("failed to record transcript entry: {e}");
        }
        Ok(response)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_first_choice() {
        let body = br#"{"choices":[{"message":{"role":"assistant","content":"A(0.5)"}},{"message":{"content":"B(0.1)"}}]}"#;
        assert_eq!(decode_chat_response(body).unwrap(), "A(0.5)");
        assert!(decode_chat_response(br#"{"choices":[]}"#).is_err());
        assert!(decode_chat_response(b"{").is_err());
    }

    #[test]
    fn replay_serves_in_order_then_fails() {
        let c = ReplayChatClient::new([
            TranscriptEntry { prompt: "p".into(), response: "1".into() },
            TranscriptEntry { prompt: "p".into(), response: "2".into() },
        ]);
        assert_eq!(c.complete("p").unwrap(), "1");
        assert_eq!(c.complete("p").unwrap(), "2");
        assert!(c.complete("p").is_err());
        assert!(c.complete("q").is_err());
    }

    #[test]
    fn record_then_replay() {
        struct Echo;
        impl ChatClient for Echo {
            fn complete(&self, prompt: &str) -> std::result::Result<String, ChatError> {
                Ok(prompt.to_uppercase())
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let rec = RecordingChatClient::new(Echo, &path).unwrap();
        assert_eq!(rec.complete("hi\nthere").unwrap(), "HI\nTHERE");
        let replay = ReplayChatClient::load(&path).unwrap();
        assert_eq!(replay.complete("hi\nthere").unwrap(), "HI\nTHERE");
    }

    #[test]
    fn transcript_errors_carry_line_numbers() {
        let err = parse_transcript(b"{\"prompt\":\"a\",\"response\":\"b\"}\n\nnot json\n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn endpoint_required() {
        let err = HttpChatClient::new(&LlmConfig::default(), None).err().unwrap();
        assert!(err.to_string().contains("llm endpoint required"));
    }
}
