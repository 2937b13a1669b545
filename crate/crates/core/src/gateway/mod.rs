//! Text generation behind one interface: an OpenAI-compatible chat endpoint
//! or a local mock, with an on-disk response cache and retries.

mod cache;
mod http;
mod mock;

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::JudgmentSet;

pub use cache::ResponseCache;
pub use http::HttpChatBackend;
pub use mock::{mock_oracle_score_text, MockOracleBackend, ScriptedBackend};

pub const DEFAULT_SCORING_MAX_TOKENS: u32 = 1024;
pub const DEFAULT_PERMUTATION_MAX_TOKENS: u32 = 256;

/// What a prompt asks for, and about which passages. Mock backends answer
/// from this; it is not part of the cache key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptContext {
    pub task: PromptTask,
    pub query_id: String,
    /// Passage ids in label order: `passage_ids[0]` is `[1]`.
    pub passage_ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptTask {
    Score,
    Permute,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    /// Distinguishes deliberate re-asks of an identical prompt.
    pub attempt: u32,
    pub context: Option<PromptContext>,
}

impl GenerationRequest {
    pub fn new(
        system_prompt: impl Into<String>,
        user_prompt: impl Into<String>,
        max_tokens: u32,
    ) -> Self {
        GenerationRequest {
            system_prompt: system_prompt.into(),
            user_prompt: user_prompt.into(),
            max_tokens,
            temperature: 0.0,
            attempt: 0,
            context: None,
        }
    }

    /// Hex SHA-256 over every generation-relevant field.
    pub fn request_key(&self) -> String {
        let mut h = Sha256::new();
        for part in [self.system_prompt.as_bytes(), self.user_prompt.as_bytes()] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part);
        }
        h.update(self.max_tokens.to_le_bytes());
        h.update(self.temperature.to_bits().to_le_bytes());
        h.update(self.attempt.to_le_bytes());
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationResponse {
    pub text: String,
    pub backend_id: String,
    pub from_cache: bool,
    pub latency_ms: u64,
}

/// A text generator. Implementations do one attempt per call; the
/// [`Gateway`] owns retries and caching.
pub trait Backend: Send + Sync {
    /// Identifies the model and any settings that change its output.
    fn id(&self) -> String;

    fn complete(&self, req: &GenerationRequest) -> Result<String>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    HttpChat,
    #[default]
    MockOracle,
    MockScripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint_url: Option<String>,
    pub model_name: String,
    pub timeout_s: u64,
    pub max_retries: u32,
    pub retry_backoff_ms: u64,
    pub cache_dir: Option<PathBuf>,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    /// Uniform noise amplitude of the oracle mock.
    pub oracle_noise: f64,
    pub oracle_seed: u64,
    /// Qrels the oracle mock reads; defaults to the pipeline's qrels.
    pub oracle_qrels: Option<PathBuf>,
    /// JSON file of canned responses for the scripted mock.
    pub script_path: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::MockOracle,
            endpoint_url: None,
            model_name: "mistralai/Mixtral-8x7B-Instruct-v0.1".into(),
            timeout_s: 120,
            max_retries: 2,
            retry_backoff_ms: 500,
            cache_dir: None,
            api_key_env: "LLM_API_KEY".into(),
            oracle_noise: 0.0,
            oracle_seed: 0,
            oracle_qrels: None,
            script_path: None,
        }
    }
}

/// Cumulative gateway counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayStats {
    pub requests: u64,
    pub cache_hits: u64,
    /// Backend attempts, including failed ones.
    pub backend_calls: u64,
}

#[derive(Default)]
struct Counters {
    requests: AtomicU64,
    cache_hits: AtomicU64,
    backend_calls: AtomicU64,
}

pub struct Gateway {
    backend: Box<dyn Backend>,
    backend_id: String,
    cache: Option<ResponseCache>,
    max_retries: u32,
    retry_backoff: Duration,
    counters: Counters,
}

impl Gateway {
    pub fn new(backend: Box<dyn Backend>) -> Self {
        let backend_id = backend.id();
        Gateway {
            backend,
            backend_id,
            cache: None,
            max_retries: 0,
            retry_backoff: Duration::ZERO,
            counters: Counters::default(),
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_retries(mut self, max_retries: u32, backoff: Duration) -> Self {
        self.max_retries = max_retries;
        self.retry_backoff = backoff;
        self
    }

    /// Builds the configured backend. `oracle_judgments` feeds the oracle
    /// mock when the config names no qrels file of its own.
    pub fn from_config(
        cfg: &BackendConfig,
        oracle_judgments: Option<&JudgmentSet>,
    ) -> Result<Self> {
        let backend: Box<dyn Backend> = match cfg.kind {
            BackendKind::HttpChat => Box::new(HttpChatBackend::from_config(cfg)?),
            BackendKind::MockOracle => {
                let judgments = match (&cfg.oracle_qrels, oracle_judgments) {
                    (Some(path), _) => crate::trec_io::read_qrels(path)?,
                    (None, Some(j)) => j.clone(),
                    (None, None) => {
                        return Err(Error::Invalid(
                            "mock_oracle backend needs qrels (oracle_qrels)".into(),
                        ))
                    }
                };
                Box::new(MockOracleBackend::new(
                    &cfg.model_name,
                    judgments,
                    cfg.oracle_noise,
                    cfg.oracle_seed,
                )?)
            }
            BackendKind::MockScripted => {
                let path = cfg.script_path.as_ref().ok_or_else(|| {
                    Error::Invalid("mock_scripted backend needs script_path".into())
                })?;
                Box::new(ScriptedBackend::from_file(&cfg.model_name, path)?)
            }
        };
        let mut gw = Gateway::new(backend)
            .with_retries(cfg.max_retries, Duration::from_millis(cfg.retry_backoff_ms));
        if let Some(dir) = &cfg.cache_dir {
            gw = gw.with_cache(ResponseCache::open(dir)?);
        }
        Ok(gw)
    }

    pub fn backend_id(&self) -> &str {
        &self.backend_id
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            requests: self.counters.requests.load(Ordering::Relaxed),
            cache_hits: self.counters.cache_hits.load(Ordering::Relaxed),
            backend_calls: self.counters.backend_calls.load(Ordering::Relaxed),
        }
    }

    fn cache_key(&self, req: &GenerationRequest) -> String {
        let mut h = Sha256::new();
        h.update(self.backend_id.as_bytes());
        h.update([0u8]);
        h.update(req.request_key().as_bytes());
        hex::encode(h.finalize())
    }

    pub fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse> {
        self.counters.requests.fetch_add(1, Ordering::Relaxed);
        let start = Instant::now();
        let key = self.cache.as_ref().map(|_| self.cache_key(req));

        if let (Some(cache), Some(key)) = (&self.cache, &key) {
            if let Some(text) = cache.get(key)? {
                self.counters.cache_hits.fetch_add(1, Ordering::Relaxed);
                return Ok(GenerationResponse {
                    text,
                    backend_id: self.backend_id.clone(),
                    from_cache: true,
                    latency_ms: start.elapsed().as_millis() as u64,
                });
            }
        }

        let text = self.complete_with_retries(req)?;
        if let (Some(cache), Some(key)) = (&self.cache, &key) {
            cache.put(key, &text)?;
        }
        Ok(GenerationResponse {
            text,
            backend_id: self.backend_id.clone(),
            from_cache: false,
            latency_ms: start.elapsed().as_millis() as u64,
        })
    }

    fn complete_with_retries(&self, req: &GenerationRequest) -> Result<String> {
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            self.counters.backend_calls.fetch_add(1, Ordering::Relaxed);
            match self.backend.complete(req) {
                Ok(text) => return Ok(text),
                Err(e) if is_retryable(&e) && attempt <= self.max_retries => {
                    log::warn!("backend attempt {attempt} failed, retrying: {e}");
                    let backoff = self
                        .retry_backoff
                        .saturating_mul(1 << (attempt - 1).min(16));
                    if !backoff.is_zero() {
                        std::thread::sleep(backoff);
                    }
                }
                Err(Error::Transport { message, .. }) => {
                    return Err(Error::Transport {
                        attempts: attempt,
                        message,
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}

fn is_retryable(e: &Error) -> bool {
    match e {
        Error::Transport { .. } => true,
        Error::Backend { status, .. } => *status == 429 || *status >= 500,
        _ => false,
    }
}
