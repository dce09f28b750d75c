//! Chat-completion gateway: one interface over HTTP and mock backends with
//! retries, an on-disk response cache, a cap on in-flight requests, token
//! accounting and per-call cost.

mod cache;
mod http;
mod mock;

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forge::{Conversation, Role};

pub use cache::{cache_key, CachedResponse, ResponseCache};
pub use http::HttpBackend;
pub use mock::{MockBackend, MockPolicy};

const BUILTIN_MODELS: &str = include_str!("../../models.cfg");

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("conversation must end with a user message")]
    EndsWithAssistant,
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limit still exceeded after {attempts} attempts: {last}")]
    RateLimitExhausted { attempts: u32, last: String },
    #[error("backend failed after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("model configuration: {0}")]
    Config(String),
    #[error("response cache: {0}")]
    Cache(#[from] std::io::Error),
}

/// Failure of a single backend request.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("transient: {0}")]
    Transient(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("auth: {0}")]
    Auth(String),
    #[error("malformed: {0}")]
    Malformed(String),
    #[error("config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl std::ops::Add for Usage {
    type Output = Usage;

    fn add(self, rhs: Usage) -> Usage {
        Usage {
            input_tokens: self.input_tokens + rhs.input_tokens,
            output_tokens: self.output_tokens + rhs.output_tokens,
        }
    }
}

fn default_temperature() -> f64 {
    0.1
}

fn default_max_output() -> u32 {
    512
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub provider: String,
    pub model_name: String,
    #[serde(default)]
    pub version: String,
    /// Identifier sent on the wire; defaults to `model_name`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_model: Option<String>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_output")]
    pub max_output_tokens: u32,
    /// USD per 1M input tokens.
    #[serde(default)]
    pub price_in: f64,
    /// USD per 1M output tokens.
    #[serde(default)]
    pub price_out: f64,
    #[serde(default)]
    pub endpoint: String,
    /// Environment variable holding the API key.
    #[serde(default)]
    pub credentials: String,
    /// Offline backend; required when `provider = "mock"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock: Option<MockPolicy>,
}

impl ModelConfig {
    pub fn mock(model_name: impl Into<String>, policy: MockPolicy) -> Self {
        Self {
            provider: "mock".into(),
            model_name: model_name.into(),
            version: "mock".into(),
            api_model: None,
            temperature: default_temperature(),
            max_output_tokens: default_max_output(),
            price_in: 0.0,
            price_out: 0.0,
            endpoint: String::new(),
            credentials: String::new(),
            mock: Some(policy),
        }
    }

    pub fn with_prices(mut self, price_in: f64, price_out: f64) -> Self {
        self.price_in = price_in;
        self.price_out = price_out;
        self
    }

    pub fn is_mock(&self) -> bool {
        self.provider == "mock"
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.model_name.is_empty() {
            return Err(GatewayError::Config("model_name is empty".into()));
        }
        if !(self.price_in >= 0.0 && self.price_out >= 0.0) {
            return Err(GatewayError::Config(format!(
                "{}: prices must be non-negative",
                self.model_name
            )));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::Config(format!(
                "{}: temperature must be non-negative",
                self.model_name
            )));
        }
        if self.is_mock() && self.mock.is_none() {
            return Err(GatewayError::Config(format!(
                "{}: mock provider needs a `mock` policy",
                self.model_name
            )));
        }
        Ok(())
    }
}

/// USD cost of `usage` under the configured per-million-token prices.
pub fn cost(usage: &Usage, config: &ModelConfig) -> f64 {
    usage.input_tokens as f64 * config.price_in / 1e6 + usage.output_tokens as f64 * config.price_out / 1e6
}

/// Model configurations from a `models.cfg` document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRegistry {
    #[serde(rename = "model")]
    pub models: Vec<ModelConfig>,
}

impl ModelRegistry {
    pub fn parse(text: &str) -> Result<Self, GatewayError> {
        let reg: ModelRegistry = toml::from_str(text).map_err(|e| GatewayError::Config(e.to_string()))?;
        for m in &reg.models {
            m.validate()?;
        }
        Ok(reg)
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text =
            fs::read_to_string(path).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// The shipped price table.
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_MODELS).expect("bundled models.cfg is valid")
    }

    pub fn get(&self, model_name: &str) -> Option<&ModelConfig> {
        self.models.iter().find(|m| m.model_name == model_name)
    }
}

/// What a backend returns for one request.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendReply {
    pub text: String,
    /// Backend-reported usage, when available.
    pub usage: Option<Usage>,
}

/// A chat-completion backend. Implementations must tolerate concurrent calls.
pub trait ChatBackend: Send + Sync {
    fn send(&self, conversation: &Conversation, config: &ModelConfig) -> Result<BackendReply, BackendError>;
}

/// Whitespace token count of every message, used when a backend reports no usage.
pub fn approximate_usage(conversation: &Conversation, output: &str) -> Usage {
    Usage {
        input_tokens: conversation
            .messages()
            .iter()
            .map(|m| m.content.split_whitespace().count() as u64)
            .sum(),
        output_tokens: output.split_whitespace().count() as u64,
    }
}

/// Builds the backend a configuration asks for.
pub fn backend_for(config: &ModelConfig) -> Result<Arc<dyn ChatBackend>, GatewayError> {
    config.validate()?;
    if config.is_mock() {
        let policy = config.mock.clone().expect("validated");
        Ok(Arc::new(MockBackend::new(policy)))
    } else {
        Ok(Arc::new(HttpBackend::new()?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_secs(1),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
        }
    }

    /// Jittered doubling: base * 2^(attempt-1) * U[0.5, 1.5), capped.
    fn delay(&self, attempt: u32) -> Duration {
        if self.base_delay.is_zero() {
            return Duration::ZERO;
        }
        let exp = self.base_delay.saturating_mul(1u32 << (attempt - 1).min(16));
        let jitter: f64 = rand::thread_rng().gen_range(0.5..1.5);
        exp.mul_f64(jitter).min(self.max_delay)
    }
}

/// Counting semaphore bounding concurrent backend requests.
#[derive(Debug)]
struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().unwrap();
        while *p == 0 {
            p = self.cv.wait(p).unwrap();
        }
        *p -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// A configured model bound to its backend.
#[derive(Clone)]
pub struct ModelHandle {
    pub config: ModelConfig,
    pub backend: Arc<dyn ChatBackend>,
}

impl ModelHandle {
    pub fn new(config: ModelConfig, backend: Arc<dyn ChatBackend>) -> Self {
        Self { config, backend }
    }

    pub fn from_config(config: ModelConfig) -> Result<Self, GatewayError> {
        let backend = backend_for(&config)?;
        Ok(Self { config, backend })
    }
}

impl std::fmt::Debug for ModelHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelHandle")
            .field("config", &self.config)
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub text: String,
    pub usage: Usage,
    pub cost_usd: f64,
    pub cached: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CacheMode {
    #[default]
    Use,
    /// Skip the lookup but still store the fresh response.
    Refresh,
}

pub struct Gateway {
    cache: Option<ResponseCache>,
    retry: RetryPolicy,
    in_flight: Semaphore,
    backend_calls: AtomicUsize,
    cache_hits: AtomicUsize,
}

impl Gateway {
    pub fn new(cache: Option<ResponseCache>, retry: RetryPolicy, max_in_flight: usize) -> Self {
        Self {
            cache,
            retry,
            in_flight: Semaphore::new(max_in_flight),
            backend_calls: AtomicUsize::new(0),
            cache_hits: AtomicUsize::new(0),
        }
    }

    /// Gateway without a cache and with immediate retries, for offline use.
    pub fn uncached() -> Self {
        Self::new(None, RetryPolicy::immediate(5), 4)
    }

    /// Successful backend requests made so far (cache hits excluded).
    pub fn backend_calls(&self) -> usize {
        self.backend_calls.load(Ordering::SeqCst)
    }

    pub fn cache_hits(&self) -> usize {
        self.cache_hits.load(Ordering::SeqCst)
    }

    pub fn complete(
        &self,
        model: &ModelHandle,
        conversation: &Conversation,
    ) -> Result<Generation, GatewayError> {
        self.complete_with(model, conversation, CacheMode::Use)
    }

    pub fn complete_with(
        &self,
        model: &ModelHandle,
        conversation: &Conversation,
        mode: CacheMode,
    ) -> Result<Generation, GatewayError> {
        if conversation.last().role != Role::User {
            return Err(GatewayError::EndsWithAssistant);
        }
        let cfg = &model.config;
        let key = cache_key(cfg, conversation);
        if mode == CacheMode::Use {
            if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&key)) {
                self.cache_hits.fetch_add(1, Ordering::SeqCst);
                return Ok(Generation {
                    cost_usd: cost(&hit.usage, cfg),
                    text: hit.text,
                    usage: hit.usage,
                    cached: true,
                });
            }
        }
        let reply = self.send_with_retry(model, conversation)?;
        let usage = reply
            .usage
            .unwrap_or_else(|| approximate_usage(conversation, &reply.text));
        if let Some(cache) = &self.cache {
            cache.put(CachedResponse {
                key,
                model_name: cfg.model_name.clone(),
                text: reply.text.clone(),
                usage,
            })?;
        }
        Ok(Generation {
            cost_usd: cost(&usage, cfg),
            text: reply.text,
            usage,
            cached: false,
        })
    }

    fn send_with_retry(
        &self,
        model: &ModelHandle,
        conversation: &Conversation,
    ) -> Result<BackendReply, GatewayError> {
        let attempts = self.retry.max_attempts.max(1);
        let mut last = BackendError::Transient("no attempt made".into());
        for attempt in 1..=attempts {
            let result = {
                let _permit = self.in_flight.acquire();
                model.backend.send(conversation, &model.config)
            };
            match result {
                Ok(reply) => {
                    self.backend_calls.fetch_add(1, Ordering::SeqCst);
                    return Ok(reply);
                }
                Err(BackendError::Auth(m)) => return Err(GatewayError::Auth(m)),
                Err(BackendError::Malformed(m)) => return Err(GatewayError::Malformed(m)),
                Err(BackendError::Config(m)) => return Err(GatewayError::Config(m)),
                Err(e) => {
                    log::warn!(
                        "{}: attempt {attempt}/{attempts} failed: {e}",
                        model.config.model_name
                    );
                    last = e;
                    if attempt < attempts {
                        thread::sleep(self.retry.delay(attempt));
                    }
                }
            }
        }
        Err(match last {
            BackendError::RateLimited(m) => GatewayError::RateLimitExhausted { attempts, last: m },
            other => GatewayError::RetriesExhausted {
                attempts,
                last: other.to_string(),
            },
        })
    }
}
