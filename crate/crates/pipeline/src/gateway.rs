//! Single choke-point for chat-completion and embedding calls.
//!
//! Every backend interaction goes through [`LlmGateway`], which enforces
//! a parallelism bound, retries transport failures and HTTP 429 with
//! jittered exponential backoff, appends token/cost accounting to a
//! shared ledger, and supports three modes:
//!
//! - `live`: call the backend, keep nothing.
//! - `record`: call the backend and write each response into a
//!   content-addressed store.
//! - `replay`: serve responses from the store only; a missing entry is
//!   an error and no network activity ever happens.
//!
//! Store keys are the SHA-256 of (kind, model id, full prompt text,
//! decoding params); at temperature 0 the prompt is the entire causal
//! input, so identical requests replay identically.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tokio::sync::Semaphore;

use rpm_core::domain::CallLedgerEntry;

/// Purpose tags attached to ledger entries, used for the
/// preprocessing/inference cost split.
pub mod purpose {
    pub const FEATURE_EXTRACTION: &str = "feature_extraction";
    pub const FACTOR_PROPOSE: &str = "factor_propose";
    pub const FACTOR_ASSIGN: &str = "factor_assign";
    pub const INFLUENCE_JUDGMENT: &str = "influence_judgment";
    pub const REASONING_CONSTRUCTION: &str = "reasoning_construction";
    pub const MEMORY_EMBEDDING: &str = "memory_embedding";
    pub const TARGET_FEATURE_EXTRACTION: &str = "target_feature_extraction";
    pub const TARGET_EMBEDDING: &str = "target_embedding";
    pub const GENERATION: &str = "generation";

    /// Tags billed to the one-time per-user preprocessing cost.
    pub const PREPROCESSING: &[&str] = &[
        FEATURE_EXTRACTION,
        FACTOR_PROPOSE,
        FACTOR_ASSIGN,
        INFLUENCE_JUDGMENT,
        REASONING_CONSTRUCTION,
        MEMORY_EMBEDDING,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatewayMode {
    Live,
    Record,
    Replay,
}

fn default_base_url() -> String {
    "https://api.openai.com".to_string()
}
fn default_model_id() -> String {
    "gpt-4o-mini".to_string()
}
fn default_embed_model_id() -> String {
    "text-embedding-3-small".to_string()
}
fn default_api_key_env() -> String {
    "OPENAI_API_KEY".to_string()
}
fn default_max_retries() -> u32 {
    3
}
fn default_max_parallel() -> usize {
    4
}
fn default_mode() -> GatewayMode {
    GatewayMode::Replay
}
fn default_replay_dir() -> PathBuf {
    PathBuf::from("replay")
}
fn default_retry_base_delay_ms() -> u64 {
    200
}

/// Backend connection, decoding, retry and accounting configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendConfig {
    #[serde(default = "default_base_url")]
    pub base_url: String,
    #[serde(default = "default_model_id")]
    pub model_id: String,
    #[serde(default = "default_embed_model_id")]
    pub embed_model_id: String,
    /// Name of the environment variable holding the API key; empty
    /// means the backend needs no auth header.
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_max_parallel")]
    pub max_parallel: usize,
    #[serde(default = "default_mode")]
    pub mode: GatewayMode,
    #[serde(default = "default_replay_dir")]
    pub replay_dir: PathBuf,
    /// Dollars per 1000 prompt tokens.
    #[serde(default)]
    pub prompt_cost_per_1k: f64,
    /// Dollars per 1000 completion tokens.
    #[serde(default)]
    pub completion_cost_per_1k: f64,
    /// Dollars per 1000 embedding input tokens.
    #[serde(default)]
    pub embed_cost_per_1k: f64,
    #[serde(default = "default_retry_base_delay_ms")]
    pub retry_base_delay_ms: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            base_url: default_base_url(),
            model_id: default_model_id(),
            embed_model_id: default_embed_model_id(),
            api_key_env: default_api_key_env(),
            temperature: 0.0,
            max_retries: default_max_retries(),
            max_parallel: default_max_parallel(),
            mode: default_mode(),
            replay_dir: default_replay_dir(),
            prompt_cost_per_1k: 0.0,
            completion_cost_per_1k: 0.0,
            embed_cost_per_1k: 0.0,
            retry_base_delay_ms: default_retry_base_delay_ms(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("network failure: {0}")]
    Network(String),
    #[error("http {status}: {body}")]
    Http { status: u16, body: String },
}

/// The wire. Injectable so tests can script, count or forbid traffic.
#[async_trait]
pub trait Transport: Send + Sync {
    async fn post_json(
        &self,
        url: &str,
        api_key: Option<&str>,
        body: &Value,
    ) -> Result<Value, TransportError>;
}

/// Production transport backed by reqwest.
pub struct HttpTransport {
    client: reqwest::Client,
}

impl HttpTransport {
    pub fn new() -> Self {
        Self {
            client: reqwest::Client::new(),
        }
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self::new()
    }
}

#[async_trait]
impl Transport for HttpTransport {
    async fn post_json(
        &self,
        url: &str,
        api_key: Option<&str>,
        body: &Value,
    ) -> Result<Value, TransportError> {
        let mut request = self.client.post(url).json(body);
        if let Some(key) = api_key {
            request = request.bearer_auth(key);
        }
        let response = request
            .send()
            .await
            .map_err(|e| TransportError::Network(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .text()
            .await
            .map_err(|e| TransportError::Network(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(TransportError::Http { status, body: text });
        }
        serde_json::from_str(&text)
            .map_err(|e| TransportError::Network(format!("invalid JSON from backend: {e}")))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("replay miss for content hash {key}")]
    ReplayMiss { key: String },
    #[error("retries exhausted after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("backend rejected the request (http {status}): {body}")]
    Config { status: u16, body: String },
    #[error("backend error: {message}")]
    Api { message: String },
    #[error("api key env var `{env}` is not set")]
    MissingApiKey { env: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("replay store error at {path}: {message}")]
    Store { path: String, message: String },
}

/// Content-addressed directory of recorded responses.
#[derive(Debug, Clone)]
pub struct ReplayStore {
    dir: PathBuf,
}

impl ReplayStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Result<Option<Value>, GatewayError> {
        let path = self.path_for(key);
        match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .map(Some)
                .map_err(|e| GatewayError::Store {
                    path: path.display().to_string(),
                    message: e.to_string(),
                }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(GatewayError::Store {
                path: path.display().to_string(),
                message: e.to_string(),
            }),
        }
    }

    pub fn put(&self, key: &str, value: &Value) -> Result<(), GatewayError> {
        std::fs::create_dir_all(&self.dir).map_err(|e| GatewayError::Store {
            path: self.dir.display().to_string(),
            message: e.to_string(),
        })?;
        let path = self.path_for(key);
        let tmp = self.dir.join(format!("{key}.tmp"));
        let body = serde_json::to_string_pretty(value).expect("recorded entries serialize");
        std::fs::write(&tmp, body).map_err(|e| GatewayError::Store {
            path: tmp.display().to_string(),
            message: e.to_string(),
        })?;
        std::fs::rename(&tmp, &path).map_err(|e| GatewayError::Store {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

fn content_key(request: &Value) -> String {
    let canonical = serde_json::to_string(request).expect("request keys serialize");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

/// Aggregate ledger view.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LedgerTotals {
    pub calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub estimated_cost: f64,
    pub latency_ms: u64,
}

/// Sums a slice of ledger entries. Entries are accumulated in a
/// canonical order so the float total does not depend on the completion
/// order of concurrent calls.
pub fn ledger_totals(entries: &[CallLedgerEntry]) -> LedgerTotals {
    let mut ordered: Vec<&CallLedgerEntry> = entries.iter().collect();
    ordered.sort_by(|a, b| {
        (
            &a.purpose,
            a.prompt_tokens,
            a.completion_tokens,
            a.latency_ms,
        )
            .cmp(&(
                &b.purpose,
                b.prompt_tokens,
                b.completion_tokens,
                b.latency_ms,
            ))
            .then(a.estimated_cost.total_cmp(&b.estimated_cost))
    });
    let mut totals = LedgerTotals::default();
    for e in ordered {
        totals.calls += 1;
        totals.prompt_tokens += e.prompt_tokens;
        totals.completion_tokens += e.completion_tokens;
        totals.estimated_cost += e.estimated_cost;
        totals.latency_ms += e.latency_ms;
    }
    totals
}

/// Per-purpose cost breakdown.
pub fn totals_by_purpose(entries: &[CallLedgerEntry]) -> BTreeMap<String, LedgerTotals> {
    let mut map: BTreeMap<String, Vec<CallLedgerEntry>> = BTreeMap::new();
    for e in entries {
        map.entry(e.purpose.clone()).or_default().push(e.clone());
    }
    map.into_iter()
        .map(|(purpose, entries)| (purpose, ledger_totals(&entries)))
        .collect()
}

/// Result of an embedding call: one vector per input plus the ledger
/// entries the call produced.
#[derive(Debug, Clone)]
pub struct EmbedOutcome {
    pub vectors: Vec<Vec<f64>>,
    pub entries: Vec<CallLedgerEntry>,
}

pub struct LlmGateway {
    config: BackendConfig,
    transport: Arc<dyn Transport>,
    semaphore: Arc<Semaphore>,
    ledger: Mutex<Vec<CallLedgerEntry>>,
    store: Option<ReplayStore>,
    embed_dim: Mutex<Option<usize>>,
}

impl LlmGateway {
    pub fn new(config: BackendConfig) -> Self {
        Self::with_transport(config, Arc::new(HttpTransport::new()))
    }

    pub fn with_transport(config: BackendConfig, transport: Arc<dyn Transport>) -> Self {
        let store = match config.mode {
            GatewayMode::Live => None,
            GatewayMode::Record | GatewayMode::Replay => {
                Some(ReplayStore::new(config.replay_dir.clone()))
            }
        };
        let permits = config.max_parallel.max(1);
        Self {
            config,
            transport,
            semaphore: Arc::new(Semaphore::new(permits)),
            ledger: Mutex::new(Vec::new()),
            store,
            embed_dim: Mutex::new(None),
        }
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    pub fn mode(&self) -> GatewayMode {
        self.config.mode
    }

    /// Snapshot of every ledger entry appended so far.
    pub fn ledger(&self) -> Vec<CallLedgerEntry> {
        self.ledger.lock().expect("ledger lock").clone()
    }

    pub fn totals(&self) -> LedgerTotals {
        ledger_totals(&self.ledger())
    }

    /// Dimensionality declared by the embedding backend, known after
    /// the first embed call.
    pub fn declared_embedding_dim(&self) -> Option<usize> {
        *self.embed_dim.lock().expect("dim lock")
    }

    fn api_key(&self) -> Result<Option<String>, GatewayError> {
        if self.config.api_key_env.is_empty() {
            return Ok(None);
        }
        match std::env::var(&self.config.api_key_env) {
            Ok(key) if !key.is_empty() => Ok(Some(key)),
            _ => Err(GatewayError::MissingApiKey {
                env: self.config.api_key_env.clone(),
            }),
        }
    }

    fn push_ledger(&self, entry: &CallLedgerEntry) {
        self.ledger.lock().expect("ledger lock").push(entry.clone());
    }

    fn chat_cost(&self, prompt_tokens: u64, completion_tokens: u64) -> f64 {
        prompt_tokens as f64 / 1000.0 * self.config.prompt_cost_per_1k
            + completion_tokens as f64 / 1000.0 * self.config.completion_cost_per_1k
    }

    async fn post_with_retry(&self, url: &str, body: &Value) -> Result<Value, GatewayError> {
        let api_key = self.api_key()?;
        let mut attempt: u32 = 0;
        loop {
            let result = self
                .transport
                .post_json(url, api_key.as_deref(), body)
                .await;
            let error = match result {
                Ok(value) => return Ok(value),
                Err(e) => e,
            };
            let retryable = matches!(
                &error,
                TransportError::Network(_) | TransportError::Http { status: 429, .. }
            );
            if !retryable {
                return Err(match error {
                    TransportError::Http { status, body } if (400..500).contains(&status) => {
                        GatewayError::Config { status, body }
                    }
                    TransportError::Http { status, body } => GatewayError::Api {
                        message: format!("http {status}: {body}"),
                    },
                    TransportError::Network(message) => GatewayError::Api { message },
                });
            }
            if attempt >= self.config.max_retries {
                return Err(GatewayError::RetriesExhausted {
                    attempts: attempt + 1,
                    last: error.to_string(),
                });
            }
            let base = self.config.retry_base_delay_ms.max(1);
            let jitter = {
                use rand::Rng;
                rand::thread_rng().gen_range(0..=base / 2)
            };
            let delay = base.saturating_mul(1 << attempt.min(16)) + jitter;
            tokio::time::sleep(std::time::Duration::from_millis(delay)).await;
            attempt += 1;
        }
    }

    /// Sends one chat completion and returns the model's text verbatim
    /// together with its ledger entry.
    pub async fn chat_complete(
        &self,
        prompt: &str,
        purpose: &str,
    ) -> Result<(String, CallLedgerEntry), GatewayError> {
        let key = content_key(&json!({
            "kind": "chat",
            "model": self.config.model_id,
            "prompt": prompt,
            "temperature": self.config.temperature,
        }));

        if self.config.mode == GatewayMode::Replay {
            let store = self.store.as_ref().expect("replay mode has a store");
            let recorded = store
                .get(&key)?
                .ok_or(GatewayError::ReplayMiss { key: key.clone() })?;
            let response = &recorded["response"];
            let text = response["text"]
                .as_str()
                .ok_or_else(|| GatewayError::Store {
                    path: key.clone(),
                    message: "recorded chat entry has no text".to_string(),
                })?
                .to_string();
            let prompt_tokens = response["prompt_tokens"].as_u64().unwrap_or(0);
            let completion_tokens = response["completion_tokens"].as_u64().unwrap_or(0);
            let entry = CallLedgerEntry {
                purpose: purpose.to_string(),
                prompt_tokens,
                completion_tokens,
                latency_ms: response["latency_ms"].as_u64().unwrap_or(0),
                estimated_cost: self.chat_cost(prompt_tokens, completion_tokens),
            };
            self.push_ledger(&entry);
            return Ok((text, entry));
        }

        let _permit = self.semaphore.acquire().await.expect("semaphore open");
        let url = format!(
            "{}/v1/chat/completions",
            self.config.base_url.trim_end_matches('/')
        );
        let body = json!({
            "model": self.config.model_id,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.config.temperature,
        });
        let start = Instant::now();
        let value = self.post_with_retry(&url, &body).await?;
        let latency_ms = start.elapsed().as_millis() as u64;

        let text = value["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| GatewayError::Api {
                message: "completion response has no choices[0].message.content".to_string(),
            })?
            .to_string();
        let prompt_tokens = value["usage"]["prompt_tokens"].as_u64().unwrap_or(0);
        let completion_tokens = value["usage"]["completion_tokens"].as_u64().unwrap_or(0);

        if self.config.mode == GatewayMode::Record {
            let store = self.store.as_ref().expect("record mode has a store");
            store.put(
                &key,
                &json!({
                    "kind": "chat",
                    "model": self.config.model_id,
                    "temperature": self.config.temperature,
                    "prompt": prompt,
                    "response": {
                        "text": text,
                        "prompt_tokens": prompt_tokens,
                        "completion_tokens": completion_tokens,
                        "latency_ms": latency_ms,
                    },
                }),
            )?;
        }

        let entry = CallLedgerEntry {
            purpose: purpose.to_string(),
            prompt_tokens,
            completion_tokens,
            latency_ms,
            estimated_cost: self.chat_cost(prompt_tokens, completion_tokens),
        };
        self.push_ledger(&entry);
        Ok((text, entry))
    }

    fn note_embed_dim(&self, dim: usize) -> Result<(), GatewayError> {
        let mut declared = self.embed_dim.lock().expect("dim lock");
        match *declared {
            None => {
                *declared = Some(dim);
                Ok(())
            }
            Some(d) if d == dim => Ok(()),
            Some(d) => Err(GatewayError::Api {
                message: format!("embedding dimensionality changed from {d} to {dim}"),
            }),
        }
    }

    async fn embed_one(
        &self,
        text: &str,
        purpose: &str,
    ) -> Result<(Vec<f64>, CallLedgerEntry), GatewayError> {
        let key = content_key(&json!({
            "kind": "embed",
            "model": self.config.embed_model_id,
            "text": text,
        }));

        if self.config.mode == GatewayMode::Replay {
            let store = self.store.as_ref().expect("replay mode has a store");
            let recorded = store
                .get(&key)?
                .ok_or(GatewayError::ReplayMiss { key: key.clone() })?;
            let response = &recorded["response"];
            let vector: Vec<f64> = response["embedding"]
                .as_array()
                .map(|a| a.iter().filter_map(Value::as_f64).collect())
                .ok_or_else(|| GatewayError::Store {
                    path: key.clone(),
                    message: "recorded embed entry has no vector".to_string(),
                })?;
            let prompt_tokens = response["prompt_tokens"].as_u64().unwrap_or(0);
            let entry = CallLedgerEntry {
                purpose: purpose.to_string(),
                prompt_tokens,
                completion_tokens: 0,
                latency_ms: response["latency_ms"].as_u64().unwrap_or(0),
                estimated_cost: prompt_tokens as f64 / 1000.0 * self.config.embed_cost_per_1k,
            };
            self.note_embed_dim(vector.len())?;
            self.push_ledger(&entry);
            return Ok((vector, entry));
        }

        let _permit = self.semaphore.acquire().await.expect("semaphore open");
        let url = format!(
            "{}/v1/embeddings",
            self.config.base_url.trim_end_matches('/')
        );
        let body = json!({
            "model": self.config.embed_model_id,
            "input": [text],
        });
        let start = Instant::now();
        let value = self.post_with_retry(&url, &body).await?;
        let latency_ms = start.elapsed().as_millis() as u64;

        let vector: Vec<f64> = value["data"][0]["embedding"]
            .as_array()
            .map(|a| a.iter().filter_map(Value::as_f64).collect())
            .ok_or_else(|| GatewayError::Api {
                message: "embedding response has no data[0].embedding".to_string(),
            })?;
        let prompt_tokens = value["usage"]["prompt_tokens"].as_u64().unwrap_or(0);

        if self.config.mode == GatewayMode::Record {
            let store = self.store.as_ref().expect("record mode has a store");
            store.put(
                &key,
                &json!({
                    "kind": "embed",
                    "model": self.config.embed_model_id,
                    "text": text,
                    "response": {
                        "embedding": vector,
                        "prompt_tokens": prompt_tokens,
                        "latency_ms": latency_ms,
                    },
                }),
            )?;
        }

        let entry = CallLedgerEntry {
            purpose: purpose.to_string(),
            prompt_tokens,
            completion_tokens: 0,
            latency_ms,
            estimated_cost: prompt_tokens as f64 / 1000.0 * self.config.embed_cost_per_1k,
        };
        self.note_embed_dim(vector.len())?;
        self.push_ledger(&entry);
        Ok((vector, entry))
    }

    /// Embeds every text, one backend call per text so replay entries
    /// stay batch-size independent. Returns one vector per input, all
    /// with the backend's declared dimensionality.
    pub async fn embed(
        &self,
        texts: &[String],
        purpose: &str,
    ) -> Result<EmbedOutcome, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::InvalidRequest(
                "embed requires a non-empty input list".to_string(),
            ));
        }
        let futures: Vec<_> = texts.iter().map(|t| self.embed_one(t, purpose)).collect();
        let results = futures::future::join_all(futures).await;
        let mut vectors = Vec::with_capacity(texts.len());
        let mut entries = Vec::with_capacity(texts.len());
        for result in results {
            let (vector, entry) = result?;
            vectors.push(vector);
            entries.push(entry);
        }
        Ok(EmbedOutcome { vectors, entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{CountingTransport, FlakyTransport, PanicTransport, ScriptedTransport};
    use rpm_core::retrieval::cosine;
    use tempfile::TempDir;

    fn record_config(dir: &TempDir) -> BackendConfig {
        BackendConfig {
            mode: GatewayMode::Record,
            replay_dir: dir.path().to_path_buf(),
            api_key_env: String::new(),
            retry_base_delay_ms: 1,
            prompt_cost_per_1k: 0.15,
            completion_cost_per_1k: 0.60,
            ..BackendConfig::default()
        }
    }

    fn replay_config(dir: &TempDir) -> BackendConfig {
        BackendConfig {
            mode: GatewayMode::Replay,
            ..record_config(dir)
        }
    }

    #[tokio::test]
    async fn record_then_replay_is_byte_identical() {
        let dir = TempDir::new().unwrap();
        let scripted = ScriptedTransport::new(8).on(&["hello"], r#"{"answer": "world"}"#);
        let recorder = LlmGateway::with_transport(record_config(&dir), Arc::new(scripted));
        let (recorded, _) = recorder.chat_complete("say hello", "test").await.unwrap();

        let replayer = LlmGateway::with_transport(replay_config(&dir), Arc::new(PanicTransport));
        let (a, _) = replayer.chat_complete("say hello", "test").await.unwrap();
        let (b, _) = replayer.chat_complete("say hello", "test").await.unwrap();
        assert_eq!(a, recorded);
        assert_eq!(a, b);
    }

    #[tokio::test]
    async fn replay_miss_names_the_content_hash() {
        let dir = TempDir::new().unwrap();
        let gateway = LlmGateway::with_transport(replay_config(&dir), Arc::new(PanicTransport));
        let err = gateway
            .chat_complete("never recorded", "test")
            .await
            .unwrap_err();
        match err {
            GatewayError::ReplayMiss { key } => assert_eq!(key.len(), 64),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[tokio::test]
    async fn ledger_tokens_match_provider_usage() {
        let dir = TempDir::new().unwrap();
        let scripted = ScriptedTransport::new(8)
            .with_usage(123, 45)
            .on(&["count"], r#"{"ok": true}"#);
        let gateway = LlmGateway::with_transport(record_config(&dir), Arc::new(scripted));
        let (_, entry) = gateway.chat_complete("count tokens", "test").await.unwrap();
        assert_eq!(entry.prompt_tokens, 123);
        assert_eq!(entry.completion_tokens, 45);
        let expected_cost = 123.0 / 1000.0 * 0.15 + 45.0 / 1000.0 * 0.60;
        assert!((entry.estimated_cost - expected_cost).abs() < 1e-12);
    }

    #[tokio::test]
    async fn embeddings_are_uniform_and_replay_deterministic() {
        let dir = TempDir::new().unwrap();
        let scripted = ScriptedTransport::new(12);
        let recorder = LlmGateway::with_transport(record_config(&dir), Arc::new(scripted));
        let texts: Vec<String> = (0..4).map(|i| format!("text {i}")).collect();
        let recorded = recorder.embed(&texts, "test").await.unwrap();
        assert_eq!(recorded.vectors.len(), 4);
        assert!(recorded.vectors.iter().all(|v| v.len() == 12));

        let replayer = LlmGateway::with_transport(replay_config(&dir), Arc::new(PanicTransport));
        let a = replayer.embed(&texts[..1], "test").await.unwrap();
        let b = replayer.embed(&texts[..1], "test").await.unwrap();
        assert_eq!(a.vectors, b.vectors);
        assert!((cosine(&a.vectors[0], &recorded.vectors[0]).unwrap() - 1.0).abs() < 1e-6);
    }

    #[tokio::test]
    async fn empty_embed_input_is_rejected() {
        let dir = TempDir::new().unwrap();
        let gateway = LlmGateway::with_transport(replay_config(&dir), Arc::new(PanicTransport));
        assert!(matches!(
            gateway.embed(&[], "test").await,
            Err(GatewayError::InvalidRequest(_))
        ));
    }

    #[tokio::test]
    async fn transport_failures_are_retried_with_backoff() {
        let dir = TempDir::new().unwrap();
        let flaky = Arc::new(FlakyTransport::failing(2, r#"{"ok": true}"#));
        let gateway = LlmGateway::with_transport(record_config(&dir), flaky.clone());
        let (text, _) = gateway.chat_complete("please", "test").await.unwrap();
        assert_eq!(text, r#"{"ok": true}"#);
        assert_eq!(flaky.attempts(), 3);
    }

    #[tokio::test]
    async fn retries_exhaust_into_typed_error() {
        let dir = TempDir::new().unwrap();
        let flaky = Arc::new(FlakyTransport::always_failing());
        let config = BackendConfig {
            max_retries: 2,
            ..record_config(&dir)
        };
        let gateway = LlmGateway::with_transport(config, flaky.clone());
        let err = gateway.chat_complete("please", "test").await.unwrap_err();
        match err {
            GatewayError::RetriesExhausted { attempts, .. } => assert_eq!(attempts, 3),
            other => panic!("unexpected error: {other}"),
        }
        assert_eq!(flaky.attempts(), 3);
    }

    #[tokio::test]
    async fn http_4xx_is_a_non_retried_config_error() {
        let dir = TempDir::new().unwrap();
        let flaky = Arc::new(FlakyTransport::http_error(401, "bad key"));
        let gateway = LlmGateway::with_transport(record_config(&dir), flaky.clone());
        let err = gateway.chat_complete("please", "test").await.unwrap_err();
        assert!(matches!(err, GatewayError::Config { status: 401, .. }));
        assert_eq!(flaky.attempts(), 1);
    }

    #[tokio::test]
    async fn parallelism_stays_within_bound() {
        let dir = TempDir::new().unwrap();
        let counting = Arc::new(CountingTransport::new(r#"{"ok": true}"#, 10));
        let config = BackendConfig {
            max_parallel: 3,
            ..record_config(&dir)
        };
        let gateway = Arc::new(LlmGateway::with_transport(config, counting.clone()));
        let calls: Vec<_> = (0..12)
            .map(|i| {
                let gw = gateway.clone();
                tokio::spawn(async move {
                    gw.chat_complete(&format!("call {i}"), "test")
                        .await
                        .unwrap();
                })
            })
            .collect();
        for call in calls {
            call.await.unwrap();
        }
        assert!(
            counting.max_in_flight() <= 3,
            "max in flight {}",
            counting.max_in_flight()
        );
        assert_eq!(counting.total(), 12);
    }

    #[tokio::test]
    async fn ledger_totals_are_additive() {
        let dir = TempDir::new().unwrap();
        let scripted = ScriptedTransport::new(8).on(&[""], r#"{"ok": true}"#);
        let gateway = LlmGateway::with_transport(record_config(&dir), Arc::new(scripted));
        for i in 0..5 {
            gateway
                .chat_complete(&format!("prompt {i}"), "test")
                .await
                .unwrap();
        }
        let entries = gateway.ledger();
        let totals = gateway.totals();
        assert_eq!(totals.calls, 5);
        assert_eq!(
            totals.prompt_tokens,
            entries.iter().map(|e| e.prompt_tokens).sum::<u64>()
        );
        let sum_cost: f64 = entries.iter().map(|e| e.estimated_cost).sum();
        assert!((totals.estimated_cost - sum_cost).abs() < 1e-12);
    }
}
