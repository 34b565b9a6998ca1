//! Injectable transports for tests and fixtures.
//!
//! [`ScriptedTransport`] answers chat requests by substring rules over
//! the rendered prompt and serves embeddings from the deterministic
//! hash embedder, so full pipeline runs can be driven (and recorded)
//! without a live backend.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use async_trait::async_trait;
use serde_json::{json, Value};

use crate::gateway::{Transport, TransportError};
use rpm_core::embed::hash_embedding;

fn approx_tokens(text: &str) -> u64 {
    (text.len() as u64 / 4).max(1)
}

struct Rule {
    needles: Vec<String>,
    responses: VecDeque<String>,
    last: Option<String>,
}

/// Scripted backend: chat prompts are matched against rules in
/// insertion order (every needle must appear in the prompt); each rule
/// serves its queued responses FIFO and then repeats the last one.
/// Embedding requests are answered with `hash_embedding`.
pub struct ScriptedTransport {
    rules: Mutex<Vec<Rule>>,
    embed_dim: usize,
    usage: Option<(u64, u64)>,
}

impl ScriptedTransport {
    pub fn new(embed_dim: usize) -> Self {
        Self {
            rules: Mutex::new(Vec::new()),
            embed_dim,
            usage: None,
        }
    }

    /// Overrides the synthesized token usage on chat responses.
    pub fn with_usage(mut self, prompt_tokens: u64, completion_tokens: u64) -> Self {
        self.usage = Some((prompt_tokens, completion_tokens));
        self
    }

    /// Adds a rule: a prompt containing every needle gets `response`.
    pub fn on(self, needles: &[&str], response: &str) -> Self {
        self.push_rule(needles, response);
        self
    }

    /// Like [`Self::on`] but usable after construction.
    pub fn push_rule(&self, needles: &[&str], response: &str) {
        let mut rules = self.rules.lock().expect("rules lock");
        if let Some(rule) = rules.iter_mut().find(|r| {
            r.needles
                .iter()
                .map(String::as_str)
                .eq(needles.iter().copied())
        }) {
            rule.responses.push_back(response.to_string());
            return;
        }
        rules.push(Rule {
            needles: needles.iter().map(|n| n.to_string()).collect(),
            responses: VecDeque::from([response.to_string()]),
            last: None,
        });
    }

    fn answer(&self, prompt: &str) -> Option<String> {
        let mut rules = self.rules.lock().expect("rules lock");
        for rule in rules.iter_mut() {
            if rule.needles.iter().all(|n| prompt.contains(n.as_str())) {
                if let Some(next) = rule.responses.pop_front() {
                    rule.last = Some(next.clone());
                    return Some(next);
                }
                return rule.last.clone();
            }
        }
        None
    }
}

#[async_trait]
impl Transport for ScriptedTransport {
    async fn post_json(
        &self,
        url: &str,
        _api_key: Option<&str>,
        body: &Value,
    ) -> Result<Value, TransportError> {
        if url.contains("/embeddings") {
            let text = body["input"][0].as_str().unwrap_or_default();
            let vector = hash_embedding(text, self.embed_dim);
            return Ok(json!({
                "data": [{"embedding": vector}],
                "usage": {"prompt_tokens": approx_tokens(text), "total_tokens": approx_tokens(text)},
            }));
        }
        let prompt = body["messages"][0]["content"].as_str().unwrap_or_default();
        let Some(text) = self.answer(prompt) else {
            let preview: String = prompt.chars().take(160).collect();
            return Err(TransportError::Http {
                status: 599,
                body: format!("no scripted response matches prompt: {preview}..."),
            });
        };
        let (prompt_tokens, completion_tokens) = self
            .usage
            .unwrap_or((approx_tokens(prompt), approx_tokens(&text)));
        Ok(json!({
            "choices": [{"message": {"role": "assistant", "content": text}}],
            "usage": {"prompt_tokens": prompt_tokens, "completion_tokens": completion_tokens},
        }))
    }
}

/// Fails the test if any network call happens; used to prove replay
/// mode never touches the wire.
pub struct PanicTransport;

#[async_trait]
impl Transport for PanicTransport {
    async fn post_json(
        &self,
        url: &str,
        _api_key: Option<&str>,
        _body: &Value,
    ) -> Result<Value, TransportError> {
        panic!("network activity in replay mode: POST {url}");
    }
}

/// Fails a configurable number of times before succeeding, or always.
pub struct FlakyTransport {
    failures_left: AtomicUsize,
    attempts: AtomicUsize,
    response: Option<String>,
    http_error: Option<(u16, String)>,
}

impl FlakyTransport {
    pub fn failing(failures: usize, then_respond: &str) -> Self {
        Self {
            failures_left: AtomicUsize::new(failures),
            attempts: AtomicUsize::new(0),
            response: Some(then_respond.to_string()),
            http_error: None,
        }
    }

    pub fn always_failing() -> Self {
        Self {
            failures_left: AtomicUsize::new(usize::MAX),
            attempts: AtomicUsize::new(0),
            response: None,
            http_error: None,
        }
    }

    /// Responds with a fixed HTTP error on every call.
    pub fn http_error(status: u16, body: &str) -> Self {
        Self {
            failures_left: AtomicUsize::new(0),
            attempts: AtomicUsize::new(0),
            response: None,
            http_error: Some((status, body.to_string())),
        }
    }

    pub fn attempts(&self) -> usize {
        self.attempts.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl Transport for FlakyTransport {
    async fn post_json(
        &self,
        _url: &str,
        _api_key: Option<&str>,
        body: &Value,
    ) -> Result<Value, TransportError> {
        self.attempts.fetch_add(1, Ordering::SeqCst);
        if let Some((status, body)) = &self.http_error {
            return Err(TransportError::Http {
                status: *status,
                body: body.clone(),
            });
        }
        let left = self.failures_left.load(Ordering::SeqCst);
        if left > 0 {
            if left != usize::MAX {
                self.failures_left.fetch_sub(1, Ordering::SeqCst);
            }
            return Err(TransportError::Network("connection reset".to_string()));
        }
        let text = self
            .response
            .clone()
            .expect("finite failures have a response");
        let prompt = body["messages"][0]["content"].as_str().unwrap_or_default();
        Ok(json!({
            "choices": [{"message": {"role": "assistant", "content": text}}],
            "usage": {"prompt_tokens": approx_tokens(prompt), "completion_tokens": approx_tokens(&text)},
        }))
    }
}

/// Tracks how many requests are in flight simultaneously.
pub struct CountingTransport {
    response: String,
    delay_ms: u64,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    total: AtomicUsize,
}

impl CountingTransport {
    pub fn new(response: &str, delay_ms: u64) -> Self {
        Self {
            response: response.to_string(),
            delay_ms,
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
            total: AtomicUsize::new(0),
        }
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn total(&self) -> usize {
        self.total.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl Transport for CountingTransport {
    async fn post_json(
        &self,
        _url: &str,
        _api_key: Option<&str>,
        _body: &Value,
    ) -> Result<Value, TransportError> {
        let current = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(current, Ordering::SeqCst);
        self.total.fetch_add(1, Ordering::SeqCst);
        tokio::time::sleep(std::time::Duration::from_millis(self.delay_ms)).await;
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        Ok(json!({
            "choices": [{"message": {"role": "assistant", "content": self.response}}],
            "usage": {"prompt_tokens": 1, "completion_tokens": 1},
        }))
    }
}
