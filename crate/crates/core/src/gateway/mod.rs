//! Uniform access to generation, forced-decoding scores, sampling and hidden
//! states over an HTTP inference service or the scripted mock.

mod entropy;
pub mod http;
pub mod mock;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenScore;

pub use entropy::truncated_entropy;
pub use http::{HttpBackend, HttpConfig};
pub use mock::{tokenize, MockBackend, MockRule, MockSettings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: "user".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Candidate log-probabilities returned per position.
    pub top_logprobs: u32,
    pub seed: Option<u64>,
}

impl GenerationRequest {
    /// Greedy single-turn request.
    pub fn user(content: impl Into<String>) -> Self {
        GenerationRequest {
            messages: vec![Message::user(content)],
            temperature: 0.0,
            max_tokens: 512,
            top_logprobs: 0,
            seed: None,
        }
    }

    pub fn temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn max_tokens(mut self, n: u32) -> Self {
        self.max_tokens = n;
        self
    }

    pub fn top_logprobs(mut self, n: u32) -> Self {
        self.top_logprobs = n;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn prompt_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(Error::InvalidInput("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedToken {
    pub token: String,
    pub logprob: f64,
    /// Sorted by descending log-probability.
    pub top_candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub tokens: Vec<GeneratedToken>,
}

/// Per-layer, per-token activations. `layers` holds the transformer layers;
/// the pre-transformer embedding output is kept apart when the backend
/// provides it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenStates {
    pub layers: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    pub embedding_layer: Option<Vec<Vec<f64>>>,
}

impl HiddenStates {
    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn token_count(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    pub fn hidden_size(&self) -> usize {
        self.layers
            .first()
            .and_then(|l| l.first())
            .map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let (tokens, width) = (self.token_count(), self.hidden_size());
        let all = self.layers.iter().chain(self.embedding_layer.iter());
        for layer in all {
            if layer.len() != tokens || layer.iter().any(|v| v.len() != width) {
                return Err(Error::InvalidInput(
                    "hidden states have ragged layers or vectors".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Forced-decoding output for one continuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredContinuation {
    pub tokens: Vec<TokenScore>,
    /// Some position's entropy misses probability mass the service did not report.
    pub entropy_truncated: bool,
    /// Scored by re-generation rather than true teacher forcing.
    pub approximate: bool,
}

/// One inference service. Implementations perform a single attempt per call;
/// retries and the in-flight bound live in [`Gateway`].
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    fn chat(&self, request: &GenerationRequest) -> Result<GenerationResult>;

    /// Teacher-forced token log-probabilities of `continuation` after `context`.
    /// Returns a capability error when the service has no scoring endpoint.
    fn score_continuation(
        &self,
        context: &str,
        continuation: &str,
        top_logprobs: u32,
    ) -> Result<Vec<GeneratedToken>>;

    fn hidden_states(&self, text: &str) -> Result<HiddenStates>;

    fn supports_logprobs(&self) -> bool;

    fn vocab_size(&self) -> Option<usize> {
        None
    }

    /// Backend-native token count, if the backend exposes its tokenizer.
    fn count_tokens(&self, _text: &str) -> Option<usize> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay_ms: 250,
            factor: 2.0,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        let ms = self.base_delay_ms as f64 * self.factor.powi(attempt.saturating_sub(1) as i32);
        Duration::from_millis(ms as u64)
    }
}

fn is_retryable(err: &Error) -> bool {
    match err {
        Error::Backend { .. } => true,
        Error::Http { status, .. } => matches!(status, 408 | 429 | 500 | 502 | 503 | 504),
        _ => false,
    }
}

#[derive(Debug)]
struct Semaphore {
    available: Mutex<usize>,
    cond: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore {
            available: Mutex::new(n.max(1)),
            cond: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().unwrap();
        while *n == 0 {
            n = self.cond.wait(n).unwrap();
        }
        *n -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().unwrap() += 1;
        self.0.cond.notify_one();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayOptions {
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    /// Candidates requested per position during forced decoding.
    pub score_top_logprobs: u32,
}

impl Default for GatewayOptions {
    fn default() -> Self {
        GatewayOptions {
            max_in_flight: 8,
            retry: RetryPolicy::default(),
            score_top_logprobs: 20,
        }
    }
}

struct Inner {
    backend: Box<dyn Backend>,
    options: GatewayOptions,
    permits: Semaphore,
}

/// Cheap-to-clone handle; clones share the backend and the in-flight bound.
#[derive(Clone)]
pub struct Gateway {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.inner.backend.name())
            .field("options", &self.inner.options)
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: impl Backend + 'static, options: GatewayOptions) -> Self {
        Gateway {
            inner: Arc::new(Inner {
                backend: Box::new(backend),
                permits: Semaphore::new(options.max_in_flight),
                options,
            }),
        }
    }

    pub fn backend_name(&self) -> &str {
        self.inner.backend.name()
    }

    pub fn options(&self) -> &GatewayOptions {
        &self.inner.options
    }

    fn with_retry<T>(&self, what: &str, call: impl Fn() -> Result<T>) -> Result<T> {
        let policy = self.inner.options.retry;
        let max = policy.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            let started = Instant::now();
            let outcome = {
                let _permit = self.inner.permits.acquire();
                call()
            };
            let elapsed = started.elapsed();
            match outcome {
                Ok(v) => {
                    log::debug!(
                        "{} {what}: attempt {attempt} ok in {elapsed:?}",
                        self.backend_name()
                    );
                    return Ok(v);
                }
                Err(e) if is_retryable(&e) && attempt < max => {
                    log::warn!(
                        "{} {what}: attempt {attempt} failed in {elapsed:?}: {e}",
                        self.backend_name()
                    );
                    std::thread::sleep(policy.delay(attempt));
                }
                Err(e) => {
                    log::warn!(
                        "{} {what}: attempt {attempt} failed in {elapsed:?}: {e}",
                        self.backend_name()
                    );
                    return Err(match e {
                        Error::Backend { message, .. } => Error::Backend {
                            attempts: attempt,
                            message,
                        },
                        other => other,
                    });
                }
            }
        }
    }

    pub fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult> {
        request.validate()?;
        self.with_retry("generate", || self.inner.backend.chat(request))
    }

    /// Forced decoding of `continuation`, one [`TokenScore`] per token.
    pub fn score_tokens(&self, context: &str, continuation: &str) -> Result<ScoredContinuation> {
        if continuation.is_empty() {
            return Err(Error::InvalidInput("continuation must be non-empty".into()));
        }
        let backend = &self.inner.backend;
        if !backend.supports_logprobs() {
            return Err(Error::Capability {
                backend: backend.name().to_string(),
                capability: "token log-probabilities".into(),
                hint: "token scoring needs a backend that returns logprobs".into(),
            });
        }
        let top = self.inner.options.score_top_logprobs;
        let forced = self.with_retry("score", || {
            backend.score_continuation(context, continuation, top)
        });
        let (tokens, approximate) = match forced {
            Ok(tokens) => (tokens, false),
            Err(Error::Capability { .. }) => {
                log::warn!(
                    "{}: no scoring endpoint, re-generating the continuation (approximate)",
                    backend.name()
                );
                (self.regenerate_continuation(context, continuation, top)?, true)
            }
            Err(e) => return Err(e),
        };
        Ok(self.to_token_scores(&tokens, approximate))
    }

    fn regenerate_continuation(
        &self,
        context: &str,
        continuation: &str,
        top: u32,
    ) -> Result<Vec<GeneratedToken>> {
        let request = GenerationRequest {
            messages: vec![
                Message::system(
                    "Repeat the text after CONTINUATION exactly, with no other output.",
                ),
                Message::user(format!("{context}\nCONTINUATION: {continuation}")),
            ],
            temperature: 0.0,
            max_tokens: (continuation.len() as u32).max(1) * 2,
            top_logprobs: top,
            seed: None,
        };
        Ok(self.generate(&request)?.tokens)
    }

    fn to_token_scores(&self, tokens: &[GeneratedToken], approximate: bool) -> ScoredContinuation {
        let vocab = self.inner.backend.vocab_size();
        let mut any_truncated = false;
        let scores = tokens
            .iter()
            .map(|t| {
                let mut lps: Vec<f64> = t.top_candidates.iter().map(|c| c.logprob).collect();
                if !t.top_candidates.iter().any(|c| c.token == t.token) {
                    lps.push(t.logprob);
                }
                let (h, truncated) = truncated_entropy(&lps, vocab);
                any_truncated |= truncated;
                TokenScore::new(t.token.clone(), t.logprob.min(0.0).exp(), h)
            })
            .collect();
        ScoredContinuation {
            tokens: scores,
            entropy_truncated: any_truncated,
            approximate,
        }
    }

    /// `n` samples; sample `i` uses seed `request.seed + i`.
    pub fn sample_n(&self, request: &GenerationRequest, n: usize) -> Result<Vec<GenerationResult>> {
        if n == 0 {
            return Err(Error::InvalidInput("sample count must be positive".into()));
        }
        if !(request.temperature > 0.0) {
            return Err(Error::InvalidInput(
                "sampling needs temperature > 0".into(),
            ));
        }
        let base = request.seed.unwrap_or(0);
        let indices: Vec<usize> = (0..n).collect();
        let results = self.map_concurrent(&indices, |_, i| {
            let mut r = request.clone();
            r.seed = Some(base.wrapping_add(*i as u64));
            self.generate(&r)
        });
        collect_all(results)
    }

    pub fn hidden_states(&self, text: &str) -> Result<HiddenStates> {
        let h = self.with_retry("hidden_states", || self.inner.backend.hidden_states(text))?;
        h.validate()?;
        Ok(h)
    }

    /// Token count for length stratification; `None` means the backend has no
    /// tokenizer and callers should fall back to whitespace counting.
    pub fn count_tokens(&self, text: &str) -> Option<usize> {
        self.inner.backend.count_tokens(text)
    }

    /// Runs `f` over `items` on up to `max_in_flight` threads and returns the
    /// results in input order.
    pub fn map_concurrent<T, R, F>(&self, items: &[T], f: F) -> Vec<Result<R>>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> Result<R> + Sync,
    {
        let workers = self.inner.options.max_in_flight.max(1).min(items.len());
        if workers <= 1 {
            return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
        }
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<R>>>> =
            Mutex::new((0..items.len()).map(|_| None).collect());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= items.len() {
                        break;
                    }
                    let r = f(i, &items[i]);
                    slots.lock().unwrap()[i] = Some(r);
                });
            }
        });
        slots
            .into_inner()
            .unwrap()
            .into_iter()
            .map(|r| r.expect("every index visited"))
            .collect()
    }
}

/// Collects ordered results, failing with every failed index if any failed.
pub fn collect_all<R>(results: Vec<Result<R>>) -> Result<Vec<R>> {
    let total = results.len();
    let mut ok = Vec::with_capacity(total);
    let mut failed = Vec::new();
    let mut first = None;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                failed.push(i);
                first.get_or_insert_with(|| e.to_string());
            }
        }
    }
    if failed.is_empty() {
        Ok(ok)
    } else {
        Err(Error::PartialFailure {
            indices: failed,
            total,
            first: first.unwrap_or_default(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles_from_base() {
        let p = RetryPolicy::default();
        assert_eq!(p.delay(1), Duration::from_millis(250));
        assert_eq!(p.delay(2), Duration::from_millis(500));
        assert_eq!(p.delay(4), Duration::from_millis(2000));
    }

    #[test]
    fn semaphore_bounds_concurrency() {
        let sem = Arc::new(Semaphore::new(2));
        let live = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    let _p = sem.acquire();
                    let now = live.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(5));
                    live.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }

    #[test]
    fn collect_all_lists_every_failure() {
        let rs: Vec<Result<u8>> = vec![Ok(1), Err(Error::Generation("x".into())), Ok(2), Err(Error::Generation("y".into()))];
        match collect_all(rs).unwrap_err() {
            Error::PartialFailure { indices, total, .. } => {
                assert_eq!(indices, vec![1, 3]);
                assert_eq!(total, 4);
            }
            e => panic!("{e:?}"),
        }
    }
}
