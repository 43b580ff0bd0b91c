//! Completion gateway: the single path to any generative model.
//!
//! Wire contract for the HTTP backend:
//!
//! ```text
//! POST {"model", "prompt", "max_tokens", "temperature", "logprobs": N}
//!   -> {"text", "first_token_logprobs": {token: logprob}}
//! ```
//!
//! `logprobs` is only sent when first-token logprobs are wanted. Chat
//! templating and vendor-specific payloads belong in a proxy in front of
//! the endpoint.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_new_tokens: u32,
    pub temperature: f64,
    pub want_first_token_logprobs: bool,
    pub top_logprobs: u32,
}

impl CompletionRequest {
    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 || self.top_logprobs == 0 || self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::PreconditionViolation(format!(
                "bad completion request: max_new_tokens={}, temperature={}, top_logprobs={}",
                self.max_new_tokens, self.temperature, self.top_logprobs
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_token_logprobs: Option<BTreeMap<String, f64>>,
}

pub trait CompletionBackend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    /// Requests that asked for first-token logprobs.
    pub judge: u64,
    pub generation: u64,
}

impl CallCounts {
    pub fn total(&self) -> u64 {
        self.judge + self.generation
    }
}

impl std::ops::Add for CallCounts {
    type Output = CallCounts;

    fn add(self, rhs: Self) -> Self {
        CallCounts {
            judge: self.judge + rhs.judge,
            generation: self.generation + rhs.generation,
        }
    }
}

/// Wraps a backend with call counters and a fan-out limit.
pub struct Gateway {
    backend: Box<dyn CompletionBackend>,
    parallelism: usize,
    judge_calls: AtomicU64,
    generation_calls: AtomicU64,
}

impl Gateway {
    pub fn new(backend: impl CompletionBackend + 'static) -> Self {
        Self::from_boxed(Box::new(backend))
    }

    pub fn from_boxed(backend: Box<dyn CompletionBackend>) -> Self {
        Self {
            backend,
            parallelism: 1,
            judge_calls: AtomicU64::new(0),
            generation_calls: AtomicU64::new(0),
        }
    }

    pub fn with_parallelism(mut self, parallelism: usize) -> Self {
        self.parallelism = parallelism.max(1);
        self
    }

    pub fn parallelism(&self) -> usize {
        self.parallelism
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse> {
        request.validate()?;
        let counter = if request.want_first_token_logprobs {
            &self.judge_calls
        } else {
            &self.generation_calls
        };
        counter.fetch_add(1, Ordering::Relaxed);
        let response = self.backend.complete(request)?;
        if request.want_first_token_logprobs {
            match &response.first_token_logprobs {
                Some(map) if !map.is_empty() => {}
                _ => return Err(Error::LogprobsUnsupported),
            }
        }
        Ok(response)
    }

    pub fn counts(&self) -> CallCounts {
        CallCounts {
            judge: self.judge_calls.load(Ordering::Relaxed),
            generation: self.generation_calls.load(Ordering::Relaxed),
        }
    }
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("parallelism", &self.parallelism)
            .field("counts", &self.counts())
            .finish_non_exhaustive()
    }
}

/// One scripted reply. The first entry whose `match_substring` occurs in the
/// prompt wins; an empty substring matches everything.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockEntry {
    pub match_substring: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_token_logprobs: Option<BTreeMap<String, f64>>,
    /// Simulated service time per call.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay_ms: Option<f64>,
}

#[derive(Debug, Clone)]
struct MockTimeout {
    budget: Duration,
    max_retries: u32,
}

/// Deterministic, replayable backend driven by a JSON script.
#[derive(Debug, Default)]
pub struct MockBackend {
    entries: Vec<MockEntry>,
    timeout: Option<MockTimeout>,
    history: Mutex<Vec<CompletionRequest>>,
}

impl MockBackend {
    pub fn new(entries: Vec<MockEntry>) -> Self {
        Self {
            entries,
            ..Self::default()
        }
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Ok(Self::new(serde_json::from_str(json)?))
    }

    pub fn from_script_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&raw)
    }

    /// Any scripted delay longer than `budget` fails the attempt; after
    /// `max_retries` further attempts the call reports `Timeout`.
    pub fn with_timeout(mut self, budget: Duration, max_retries: u32) -> Self {
        self.timeout = Some(MockTimeout { budget, max_retries });
        self
    }

    /// Every request seen so far, in arrival order.
    pub fn history(&self) -> Vec<CompletionRequest> {
        self.history.lock().expect("mock history poisoned").clone()
    }
}

impl CompletionBackend for MockBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse> {
        self.history
            .lock()
            .expect("mock history poisoned")
            .push(request.clone());
        let entry = self
            .entries
            .iter()
            .find(|e| request.prompt.contains(&e.match_substring))
            .ok_or_else(|| Error::BackendUnavailable("mock script has no entry for prompt".into()))?;
        let delay = entry
            .delay_ms
            .map(|ms| Duration::from_secs_f64(ms.max(0.0) / 1000.0))
            .unwrap_or_default();
        if let Some(t) = &self.timeout {
            if delay > t.budget {
                for _ in 0..=t.max_retries {
                    std::thread::sleep(t.budget);
                }
                return Err(Error::Timeout {
                    attempts: t.max_retries + 1,
                });
            }
        }
        if !delay.is_zero() {
            std::thread::sleep(delay);
        }
        if request.want_first_token_logprobs && entry.first_token_logprobs.is_none() {
            return Err(Error::LogprobsUnsupported);
        }
        Ok(CompletionResponse {
            text: entry.text.clone(),
            first_token_logprobs: entry.first_token_logprobs.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpBackendConfig {
    pub url: String,
    pub model: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub supports_logprobs: bool,
    /// Forwarded as `"seed"` when set.
    pub seed: Option<u64>,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        Self {
            url: "http://127.0.0.1:8000/completions".into(),
            model: String::new(),
            timeout_ms: 60_000,
            max_retries: 3,
            backoff_ms: 200,
            supports_logprobs: true,
            seed: None,
        }
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    logprobs: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Debug)]
enum Attempt {
    Timeout,
    Retryable(String),
    Fatal(String),
}

pub struct HttpBackend {
    config: HttpBackendConfig,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build();
        Self { config, agent }
    }

    fn attempt(&self, body: &WireRequest<'_>) -> std::result::Result<CompletionResponse, Attempt> {
        match self.agent.post(&self.config.url).send_json(body) {
            Ok(resp) => resp
                .into_json::<CompletionResponse>()
                .map_err(|e| {
                    if is_timeout_io(&e) {
                        Attempt::Timeout
                    } else {
                        Attempt::Fatal(format!("bad response body: {e}"))
                    }
                }),
            Err(ureq::Error::Status(code, _)) if code == 429 || code >= 500 => {
                Err(Attempt::Retryable(format!("HTTP {code}")))
            }
            Err(ureq::Error::Status(code, _)) => Err(Attempt::Fatal(format!("HTTP {code}"))),
            Err(ureq::Error::Transport(t)) => {
                if transport_timed_out(&t) {
                    Err(Attempt::Timeout)
                } else {
                    Err(Attempt::Retryable(t.to_string()))
                }
            }
        }
    }
}

fn is_timeout_io(e: &std::io::Error) -> bool {
    matches!(e.kind(), std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock)
}

fn transport_timed_out(t: &ureq::Transport) -> bool {
    let mut source = std::error::Error::source(t);
    while let Some(err) = source {
        if let Some(io) = err.downcast_ref::<std::io::Error>() {
            if is_timeout_io(io) {
                return true;
            }
        }
        source = err.source();
    }
    t.to_string().contains("timed out")
}

impl CompletionBackend for HttpBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse> {
        if request.want_first_token_logprobs && !self.config.supports_logprobs {
            return Err(Error::LogprobsUnsupported);
        }
        let body = WireRequest {
            model: &self.config.model,
            prompt: &request.prompt,
            max_tokens: request.max_new_tokens,
            temperature: request.temperature,
            logprobs: request
                .want_first_token_logprobs
                .then_some(request.top_logprobs),
            seed: self.config.seed,
        };
        let attempts = self.config.max_retries + 1;
        let mut last = Attempt::Retryable("no attempt made".into());
        for i in 0..attempts {
            if i > 0 {
                let backoff = self.config.backoff_ms.saturating_mul(1 << (i - 1).min(16));
                std::thread::sleep(Duration::from_millis(backoff));
            }
            match self.attempt(&body) {
                Ok(resp) => return Ok(resp),
                Err(Attempt::Fatal(msg)) => {
                    return Err(Error::BackendUnavailable(format!("{}: {msg}", self.config.url)))
                }
                Err(other) => {
                    tracing::warn!(attempt = i + 1, error = ?other, "completion request failed");
                    last = other;
                }
            }
        }
        Err(match last {
            Attempt::Timeout => Error::Timeout { attempts },
            Attempt::Retryable(msg) | Attempt::Fatal(msg) => {
                Error::BackendUnavailable(format!("{}: {msg}", self.config.url))
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn judge_request(prompt: &str) -> CompletionRequest {
        CompletionRequest {
            prompt: prompt.into(),
            max_new_tokens: 1,
            temperature: 0.0,
            want_first_token_logprobs: true,
            top_logprobs: 20,
        }
    }

    fn script() -> &'static str {
        r#"[
            {"match_substring": "Query: q1", "text": "1", "first_token_logprobs": {"1": -0.1, "0": -2.3}},
            {"match_substring": "write a passage", "text": "hypo"}
        ]"#
    }

    #[test]
    fn mock_replays_script() {
        let gw = Gateway::new(MockBackend::from_json(script()).unwrap());
        let resp = gw.complete(&judge_request("...Query: q1...")).unwrap();
        assert_eq!(resp.text, "1");
        let lp = resp.first_token_logprobs.unwrap();
        assert_eq!((lp["1"], lp["0"]), (-0.1, -2.3));
        assert_eq!(gw.counts(), CallCounts { judge: 1, generation: 0 });
    }

    #[test]
    fn logprobs_missing_from_script() {
        let gw = Gateway::new(MockBackend::from_json(script()).unwrap());
        assert!(matches!(
            gw.complete(&judge_request("please write a passage")),
            Err(Error::LogprobsUnsupported)
        ));
    }

    #[test]
    fn unmatched_prompt_is_unavailable() {
        let gw = Gateway::new(MockBackend::from_json(script()).unwrap());
        assert!(matches!(gw.complete(&judge_request("nothing")), Err(Error::BackendUnavailable(_))));
    }

    #[test]
    fn mock_timeout_after_retries() {
        let backend = MockBackend::new(vec![MockEntry {
            match_substring: String::new(),
            text: "x".into(),
            first_token_logprobs: None,
            delay_ms: Some(50.0),
        }])
        .with_timeout(Duration::from_millis(2), 3);
        let gw = Gateway::new(backend);
        let mut req = judge_request("p");
        req.want_first_token_logprobs = false;
        assert!(matches!(gw.complete(&req), Err(Error::Timeout { attempts: 4 })));
        assert_eq!(gw.counts().generation, 1);
    }

    #[test]
    fn request_validation() {
        let gw = Gateway::new(MockBackend::default());
        let mut req = judge_request("p");
        req.max_new_tokens = 0;
        assert!(matches!(gw.complete(&req), Err(Error::PreconditionViolation(_))));
        assert_eq!(gw.counts().total(), 0);
    }
}
