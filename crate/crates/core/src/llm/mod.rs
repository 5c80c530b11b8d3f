//! The single choke-point for LLM traffic.
//!
//! Requests go to one of two logical slots: the reasoning `agent` model and
//! the cheaper `annotator` model. The [`Gateway`] serves them in one of four
//! modes: `live` (backend only), `record` (backend, then persist to the
//! replay cache), `replay` (cache only, no network) and `mock` (a scripted
//! in-process backend).

mod cache;
mod http;
mod mock;

use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cache::{CacheRecord, ReplayCache};
pub use http::{Endpoint, HttpBackend};
pub use mock::{MockBackend, MockReply};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Agent,
    Annotator,
}

impl Slot {
    pub fn as_str(self) -> &'static str {
        match self {
            Slot::Agent => "agent",
            Slot::Annotator => "annotator",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LlmMode {
    Live,
    Record,
    Replay,
    Mock,
}

impl std::str::FromStr for LlmMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "live" => Ok(LlmMode::Live),
            "record" => Ok(LlmMode::Record),
            "replay" => Ok(LlmMode::Replay),
            "mock" => Ok(LlmMode::Mock),
            other => Err(Error::Config(format!(
                "unknown llm mode `{other}` (expected live|record|replay|mock)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub slot: Slot,
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
}

pub const DEFAULT_AGENT_MAX_TOKENS: u32 = 4096;
pub const DEFAULT_ANNOTATOR_MAX_TOKENS: u32 = 16;

impl LlmRequest {
    pub fn agent(prompt: impl Into<String>) -> Self {
        LlmRequest {
            slot: Slot::Agent,
            prompt: prompt.into(),
            max_tokens: DEFAULT_AGENT_MAX_TOKENS,
            temperature: 0.0,
        }
    }

    pub fn annotator(prompt: impl Into<String>) -> Self {
        LlmRequest {
            slot: Slot::Annotator,
            prompt: prompt.into(),
            max_tokens: DEFAULT_ANNOTATOR_MAX_TOKENS,
            temperature: 0.0,
        }
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    /// SHA-256 over slot, temperature, max_tokens and prompt bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.slot.as_str().as_bytes());
        h.update([0]);
        h.update(self.temperature.to_bits().to_be_bytes());
        h.update(self.max_tokens.to_be_bytes());
        h.update([0]);
        h.update(self.prompt.as_bytes());
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input: u64,
    pub output: u64,
}

impl TokenUsage {
    /// Rough 4-characters-per-token estimate for backends that report nothing.
    pub fn estimate(prompt: &str, response: &str) -> Self {
        let est = |s: &str| s.chars().count().div_ceil(4) as u64;
        TokenUsage {
            input: est(prompt),
            output: est(response),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmResponse {
    pub text: String,
    pub cached: bool,
    pub token_usage: TokenUsage,
}

/// What a backend returns for one request.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendReply {
    pub text: String,
    pub usage: TokenUsage,
}

pub trait LlmBackend: Send + Sync {
    fn complete(&self, request: &LlmRequest) -> Result<BackendReply>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SlotUsage {
    pub calls: u64,
    pub cached_calls: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

/// Cumulative token totals per slot. Replayed responses count with the
/// usage recorded alongside them, so accounting is identical across modes.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct UsageReport {
    pub per_slot: BTreeMap<Slot, SlotUsage>,
}

impl UsageReport {
    pub fn slot(&self, slot: Slot) -> SlotUsage {
        self.per_slot.get(&slot).copied().unwrap_or_default()
    }

    fn add(&mut self, slot: Slot, usage: TokenUsage, cached: bool) {
        let e = self.per_slot.entry(slot).or_default();
        e.calls += 1;
        e.cached_calls += cached as u64;
        e.input_tokens += usage.input;
        e.output_tokens += usage.output;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }
}

struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    fn new(n: usize) -> Self {
        Limiter {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        {
            let mut free = self.free.lock().unwrap();
            while *free == 0 {
                free = self.cv.wait(free).unwrap();
            }
            *free -= 1;
        }
        let out = f();
        *self.free.lock().unwrap() += 1;
        self.cv.notify_one();
        out
    }
}

pub const DEFAULT_IN_FLIGHT: usize = 8;

pub struct Gateway {
    mode: LlmMode,
    backend: Option<Arc<dyn LlmBackend>>,
    cache: Option<Arc<ReplayCache>>,
    usage: Mutex<UsageReport>,
    limiter: Limiter,
    retry: RetryPolicy,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway").field("mode", &self.mode).finish_non_exhaustive()
    }
}

impl Gateway {
    /// Mock mode over an in-process scripted backend.
    pub fn mock(backend: impl LlmBackend + 'static) -> Self {
        Gateway::build(LlmMode::Mock, Some(Arc::new(backend)), None)
    }

    /// Replay mode: every request must already be in `cache`.
    pub fn replay(cache: Arc<ReplayCache>) -> Self {
        Gateway::build(LlmMode::Replay, None, Some(cache))
    }

    /// Record mode: call `backend`, then persist each response into `cache`.
    pub fn record(backend: Arc<dyn LlmBackend>, cache: Arc<ReplayCache>) -> Self {
        Gateway::build(LlmMode::Record, Some(backend), Some(cache))
    }

    pub fn live(backend: Arc<dyn LlmBackend>) -> Self {
        Gateway::build(LlmMode::Live, Some(backend), None)
    }

    fn build(
        mode: LlmMode,
        backend: Option<Arc<dyn LlmBackend>>,
        cache: Option<Arc<ReplayCache>>,
    ) -> Self {
        Gateway {
            mode,
            backend,
            cache,
            usage: Mutex::new(UsageReport::default()),
            limiter: Limiter::new(DEFAULT_IN_FLIGHT),
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_in_flight_limit(mut self, n: usize) -> Self {
        self.limiter = Limiter::new(n);
        self
    }

    pub fn mode(&self) -> LlmMode {
        self.mode
    }

    pub fn complete(&self, request: &LlmRequest) -> Result<LlmResponse> {
        let response = match self.mode {
            LlmMode::Replay => {
                let cache = self
                    .cache
                    .as_ref()
                    .ok_or_else(|| Error::Config("replay mode requires a cache".into()))?;
                let digest = request.digest();
                let rec = cache.lookup(&digest).ok_or(Error::ReplayMiss { digest })?;
                LlmResponse {
                    text: rec.response,
                    cached: true,
                    token_usage: TokenUsage {
                        input: rec.input_tokens,
                        output: rec.output_tokens,
                    },
                }
            }
            LlmMode::Mock => {
                let reply = self.backend()?.complete(request)?;
                LlmResponse {
                    text: reply.text,
                    cached: false,
                    token_usage: reply.usage,
                }
            }
            LlmMode::Live | LlmMode::Record => {
                let reply = self.limiter.run(|| self.call_with_retry(request))?;
                if self.mode == LlmMode::Record {
                    let cache = self
                        .cache
                        .as_ref()
                        .ok_or_else(|| Error::Config("record mode requires a cache".into()))?;
                    cache.store(CacheRecord::new(request, &reply))?;
                }
                LlmResponse {
                    text: reply.text,
                    cached: false,
                    token_usage: reply.usage,
                }
            }
        };
        self.usage
            .lock()
            .unwrap()
            .add(request.slot, response.token_usage, response.cached);
        Ok(response)
    }

    fn backend(&self) -> Result<&Arc<dyn LlmBackend>> {
        self.backend
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{:?} mode requires a backend", self.mode)))
    }

    fn call_with_retry(&self, request: &LlmRequest) -> Result<BackendReply> {
        let backend = self.backend()?;
        let mut delay = self.retry.initial_backoff;
        let attempts = self.retry.attempts.max(1);
        let mut last = None;
        for attempt in 1..=attempts {
            match backend.complete(request) {
                Ok(r) => return Ok(r),
                Err(e) => {
                    log::warn!("llm attempt {attempt}/{attempts} failed: {e}");
                    last = Some(e);
                    if attempt < attempts {
                        std::thread::sleep(delay);
                        delay *= 2;
                    }
                }
            }
        }
        Err(last.unwrap_or_else(|| Error::Backend("no attempts made".into())))
    }

    pub fn usage_report(&self) -> UsageReport {
        self.usage.lock().unwrap().clone()
    }
}
