//! Language-model endpoints for the device and cloud tiers.
//!
//! [`Backends`] is the registry the rest of the pipeline talks to. It owns
//! per-tier pricing, rate limiting and retries; the actual transport is a
//! [`LanguageModel`] implementation (an OpenAI-compatible HTTP client or the
//! scripted [`MockModel`]).

mod mock;
mod openai;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{CostLedger, ModelTier};

pub use mock::{DifficultyRule, MockModel, MockReply, MockRule, MockScript, DEFAULT_EMBEDDING_DIM};
pub use openai::{parse_chat_response, parse_embedding_response, OpenAiModel};

/// Environment variable holding the cloud API key.
pub const CLOUD_API_KEY_ENV: &str = "DIVTHOUGHT_CLOUD_API_KEY";

/// Prompt wrapper whose continuation token's hidden state serves as the
/// sentence embedding.
pub fn embedding_prompt(text: &str) -> String {
    format!("This sentence: \"{text}\" means in one word: \"")
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("could not decode response from {endpoint}: {message}")]
    Decode { endpoint: String, message: String },

    #[error("{endpoint} does not provide {capability}")]
    Capability {
        endpoint: String,
        capability: &'static str,
    },

    #[error("no backend registered for the {0} tier")]
    Unregistered(ModelTier),

    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport { .. })
    }
}

/// System and user text for one chat call.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Prompt {
    pub system: String,
    pub user: String,
}

impl Prompt {
    pub fn user(user: impl Into<String>) -> Self {
        Prompt {
            system: String::new(),
            user: user.into(),
        }
    }

    pub fn new(system: impl Into<String>, user: impl Into<String>) -> Self {
        Prompt {
            system: system.into(),
            user: user.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub want_token_probs: bool,
}

impl ChatRequest {
    pub fn new(prompt: Prompt) -> Self {
        ChatRequest {
            system: prompt.system,
            user: prompt.user,
            max_tokens: 512,
            temperature: 0.0,
            want_token_probs: false,
        }
    }

    pub fn with_token_probs(mut self, want: bool) -> Self {
        self.want_token_probs = want;
        self
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    fn validate(&self) -> Result<(), BackendError> {
        if self.max_tokens < 1 {
            return Err(BackendError::InvalidRequest("max_tokens must be at least 1".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature must be nonnegative, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    /// Sampling probability of each generated token, in (0, 1].
    pub token_probs: Vec<f64>,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub elapsed_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

fn default_max_in_flight() -> usize {
    8
}

fn default_timeout() -> f64 {
    120.0
}

/// Endpoint and pricing for one tier, as read from the backends file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendProfile {
    #[serde(skip_deserializing, default = "device_tier")]
    pub tier: ModelTier,
    /// Base URL of an OpenAI-compatible API, or `"mock"`.
    pub endpoint: String,
    pub model_name: String,
    #[serde(default)]
    pub price_per_prompt_token_cents: f64,
    #[serde(default)]
    pub price_per_completion_token_cents: f64,
    /// Script file for `"mock"` endpoints, relative to the backends file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock_script: Option<PathBuf>,
    /// Base URL serving `POST /embeddings` with hidden-state vectors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_endpoint: Option<String>,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout")]
    pub timeout_seconds: f64,
}

fn device_tier() -> ModelTier {
    ModelTier::Device
}

impl BackendProfile {
    pub fn mock(tier: ModelTier, model_name: &str, prompt_cents: f64, completion_cents: f64) -> Self {
        BackendProfile {
            tier,
            endpoint: "mock".into(),
            model_name: model_name.into(),
            price_per_prompt_token_cents: prompt_cents,
            price_per_completion_token_cents: completion_cents,
            mock_script: None,
            embedding_endpoint: None,
            max_in_flight: default_max_in_flight(),
            timeout_seconds: default_timeout(),
        }
    }

    pub fn is_mock(&self) -> bool {
        self.endpoint == "mock"
    }

    fn validate(&self) -> Result<()> {
        let prices = [self.price_per_prompt_token_cents, self.price_per_completion_token_cents];
        if prices.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Config(format!(
                "{} tier prices must be finite and nonnegative",
                self.tier
            )));
        }
        if self.tier == ModelTier::Device && prices.iter().any(|p| *p != 0.0) {
            log::warn!("device tier prices are ignored: on-device calls carry no API cost");
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config(format!("{} tier max_in_flight must be at least 1", self.tier)));
        }
        Ok(())
    }
}

/// Bills one response against a profile. Device calls are never billed.
pub fn price(response: &ChatResponse, profile: &BackendProfile) -> CostLedger {
    let api_cents = match profile.tier {
        ModelTier::Device => 0.0,
        ModelTier::Cloud => {
            response.prompt_tokens as f64 * profile.price_per_prompt_token_cents
                + response.completion_tokens as f64 * profile.price_per_completion_token_cents
        }
    };
    CostLedger {
        wall_seconds: response.elapsed_seconds,
        api_cents,
        device_calls: u64::from(profile.tier == ModelTier::Device),
        cloud_calls: u64::from(profile.tier == ModelTier::Cloud),
        prompt_tokens: response.prompt_tokens,
        completion_tokens: response.completion_tokens,
    }
}

/// Transport to one model.
pub trait LanguageModel: Send + Sync {
    fn endpoint(&self) -> &str;

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;

    /// Hidden state of the token generated after `prompt`.
    fn hidden_state(&self, _prompt: &str) -> Result<Vec<f64>, BackendError> {
        Err(BackendError::Capability {
            endpoint: self.endpoint().to_string(),
            capability: "hidden-state embeddings",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

struct Limiter {
    max: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(max: usize) -> Self {
        Limiter {
            max,
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.max {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.0.freed.notify_one();
    }
}

struct TierBackend {
    profile: BackendProfile,
    model: Arc<dyn LanguageModel>,
    limiter: Limiter,
    embedding_dim: OnceLock<usize>,
}

/// Per-tier model registry.
pub struct Backends {
    device: Option<TierBackend>,
    cloud: Option<TierBackend>,
    retry: RetryPolicy,
}

impl Default for Backends {
    fn default() -> Self {
        Backends::new()
    }
}

#[derive(Deserialize)]
struct ProfilesFile {
    device: Option<BackendProfile>,
    cloud: Option<BackendProfile>,
}

impl Backends {
    pub fn new() -> Self {
        Backends {
            device: None,
            cloud: None,
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn register(&mut self, profile: BackendProfile, model: Arc<dyn LanguageModel>) -> Result<()> {
        profile.validate()?;
        let slot = match profile.tier {
            ModelTier::Device => &mut self.device,
            ModelTier::Cloud => &mut self.cloud,
        };
        *slot = Some(TierBackend {
            limiter: Limiter::new(profile.max_in_flight),
            profile,
            model,
            embedding_dim: OnceLock::new(),
        });
        Ok(())
    }

    /// Convenience for tests: register a scripted mock on `tier`.
    pub fn register_mock(&mut self, profile: BackendProfile, script: MockScript, seed: u64) -> Result<()> {
        let model = MockModel::new(script, seed)?;
        self.register(profile, Arc::new(model))
    }

    /// Loads `{"device": {...}, "cloud": {...}}`. Mock script paths are
    /// resolved relative to the file; `seed` feeds mock embeddings.
    pub fn from_profiles_file(path: &Path, seed: u64) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let file: ProfilesFile = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut backends = Backends::new();
        for (tier, profile) in [(ModelTier::Device, file.device), (ModelTier::Cloud, file.cloud)] {
            let Some(mut profile) = profile else { continue };
            profile.tier = tier;
            let model: Arc<dyn LanguageModel> = if profile.is_mock() {
                let script_path = profile
                    .mock_script
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("{tier} tier is a mock without mock_script")))?;
                let script = MockScript::load(&base.join(script_path))?;
                Arc::new(MockModel::new(script, seed)?)
            } else {
                let api_key = match tier {
                    ModelTier::Cloud => std::env::var(CLOUD_API_KEY_ENV).ok(),
                    ModelTier::Device => None,
                };
                Arc::new(OpenAiModel::new(&profile, api_key)?)
            };
            backends.register(profile, model)?;
        }
        Ok(backends)
    }

    fn tier(&self, tier: ModelTier) -> Result<&TierBackend, BackendError> {
        match tier {
            ModelTier::Device => self.device.as_ref(),
            ModelTier::Cloud => self.cloud.as_ref(),
        }
        .ok_or(BackendError::Unregistered(tier))
    }

    pub fn is_registered(&self, tier: ModelTier) -> bool {
        self.tier(tier).is_ok()
    }

    pub fn profile(&self, tier: ModelTier) -> Result<&BackendProfile, BackendError> {
        self.tier(tier).map(|b| &b.profile)
    }

    /// Runs one completion on `tier`, retrying transport failures, and
    /// returns the response with its billed cost.
    pub fn complete(
        &self,
        tier: ModelTier,
        request: &ChatRequest,
    ) -> Result<(ChatResponse, CostLedger), BackendError> {
        request.validate()?;
        let backend = self.tier(tier)?;
        let response = self.with_retries(|| {
            let _permit = backend.limiter.acquire();
            backend.model.complete(request)
        })?;
        if request.want_token_probs && response.token_probs.is_empty() {
            return Err(BackendError::Capability {
                endpoint: backend.model.endpoint().to_string(),
                capability: "token probabilities",
            });
        }
        if let Some(p) = response.token_probs.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
            return Err(BackendError::Decode {
                endpoint: backend.model.endpoint().to_string(),
                message: format!("token probability {p} outside (0, 1]"),
            });
        }
        let ledger = price(&response, &backend.profile);
        Ok((response, ledger))
    }

    /// Embeds `text` through the sentence-embedding prompt on `tier`.
    pub fn embed_sentence(&self, tier: ModelTier, text: &str) -> Result<EmbeddingVector, BackendError> {
        if text.trim().is_empty() {
            return Err(BackendError::InvalidRequest("cannot embed empty text".into()));
        }
        let backend = self.tier(tier)?;
        let prompt = embedding_prompt(text);
        let values = self.with_retries(|| {
            let _permit = backend.limiter.acquire();
            backend.model.hidden_state(&prompt)
        })?;
        let decode_err = |message: String| BackendError::Decode {
            endpoint: backend.model.endpoint().to_string(),
            message,
        };
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(decode_err("embedding is empty or not finite".into()));
        }
        let dim = *backend.embedding_dim.get_or_init(|| values.len());
        if dim != values.len() {
            return Err(decode_err(format!(
                "embedding dimension changed from {dim} to {}",
                values.len()
            )));
        }
        Ok(EmbeddingVector { values })
    }

    fn with_retries<T>(
        &self,
        mut call: impl FnMut() -> Result<T, BackendError>,
    ) -> Result<T, BackendError> {
        let mut attempt = 1;
        loop {
            match call() {
                Err(BackendError::Transport { message, .. }) => {
                    if attempt >= self.retry.max_attempts {
                        return Err(BackendError::Transport {
                            attempts: attempt,
                            message,
                        });
                    }
                    let delay = self.retry.base_delay * 2u32.pow(attempt - 1);
                    log::warn!("transport failure (attempt {attempt}): {message}; retrying in {delay:?}");
                    thread::sleep(delay);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    fn script() -> MockScript {
        MockScript {
            default: MockReply::new("I do not know", Some(vec![0.5, 0.5, 0.5, 0.5]), 0.1),
            rules: vec![
                MockRule::new("2+2", MockReply::new("4", Some(vec![0.99]), 0.2)),
                MockRule::new("no probs", MockReply::new("plain answer", None, 0.2)),
            ],
            difficulty: vec![],
            embedding_dim: 16,
        }
    }

    fn backends() -> Backends {
        let mut b = Backends::new();
        b.register_mock(BackendProfile::mock(ModelTier::Device, "slm", 0.0, 0.0), script(), 7)
            .unwrap();
        b.register_mock(BackendProfile::mock(ModelTier::Cloud, "llm", 0.001, 0.002), script(), 7)
            .unwrap();
        b
    }

    #[test]
    fn scripted_echo() {
        let b = backends();
        let req = ChatRequest::new(Prompt::user("what is 2+2?")).with_token_probs(true);
        let (resp, ledger) = b.complete(ModelTier::Device, &req).unwrap();
        assert_eq!(resp.text, "4");
        assert_eq!(resp.token_probs, vec![0.99]);
        assert_eq!(ledger.api_cents, 0.0);
        assert_eq!(ledger.device_calls, 1);
    }

    #[test]
    fn missing_probs_is_a_capability_error() {
        let b = backends();
        let req = ChatRequest::new(Prompt::user("no probs here")).with_token_probs(true);
        assert!(matches!(
            b.complete(ModelTier::Device, &req),
            Err(BackendError::Capability { .. })
        ));
        let req = ChatRequest::new(Prompt::user("no probs here"));
        assert!(b.complete(ModelTier::Device, &req).is_ok());
    }

    #[test]
    fn invalid_requests_rejected() {
        let b = backends();
        let req = ChatRequest::new(Prompt::user("x")).with_max_tokens(0);
        assert!(matches!(b.complete(ModelTier::Device, &req), Err(BackendError::InvalidRequest(_))));
        let req = ChatRequest::new(Prompt::user("x")).with_temperature(-1.0);
        assert!(matches!(b.complete(ModelTier::Device, &req), Err(BackendError::InvalidRequest(_))));
    }

    #[test]
    fn unregistered_tier() {
        let b = Backends::new();
        let req = ChatRequest::new(Prompt::user("x"));
        assert!(matches!(
            b.complete(ModelTier::Cloud, &req),
            Err(BackendError::Unregistered(ModelTier::Cloud))
        ));
    }

    fn response(prompt: u64, completion: u64) -> ChatResponse {
        ChatResponse {
            text: String::new(),
            token_probs: vec![],
            prompt_tokens: prompt,
            completion_tokens: completion,
            elapsed_seconds: 1.5,
        }
    }

    #[test]
    fn pricing_examples() {
        let cloud = BackendProfile::mock(ModelTier::Cloud, "llm", 0.001, 0.002);
        let ledger = price(&response(100, 50), &cloud);
        assert!((ledger.api_cents - 0.2).abs() < 1e-12);
        assert_eq!(ledger.wall_seconds, 1.5);
        assert_eq!(ledger.cloud_calls, 1);
        assert_eq!(price(&response(0, 0), &cloud).api_cents, 0.0);

        let mut device = cloud.clone();
        device.tier = ModelTier::Device;
        assert_eq!(price(&response(100, 50), &device).api_cents, 0.0);
    }

    #[test]
    fn pricing_is_linear() {
        let cloud = BackendProfile::mock(ModelTier::Cloud, "llm", 0.00025, 0.001);
        for (a, b) in [((10, 3), (7, 9)), ((1000, 20), (0, 1)), ((123, 456), (789, 12))] {
            let split = price(&response(a.0, a.1), &cloud).api_cents + price(&response(b.0, b.1), &cloud).api_cents;
            let joined = price(&response(a.0 + b.0, a.1 + b.1), &cloud).api_cents;
            assert!((split - joined).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_rejects_empty_text() {
        let b = backends();
        assert!(matches!(
            b.embed_sentence(ModelTier::Device, "   "),
            Err(BackendError::InvalidRequest(_))
        ));
        assert_eq!(b.embed_sentence(ModelTier::Device, "hello").unwrap().dim(), 16);
    }

    struct Flaky {
        failures: u32,
        calls: AtomicU32,
        decode: bool,
    }

    impl LanguageModel for Flaky {
        fn endpoint(&self) -> &str {
            "flaky"
        }

        fn complete(&self, _request: &ChatRequest) -> Result<ChatResponse, BackendError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if self.decode {
                return Err(BackendError::Decode {
                    endpoint: "flaky".into(),
                    message: "bad json".into(),
                });
            }
            if n < self.failures {
                Err(BackendError::Transport {
                    attempts: 1,
                    message: "connection reset".into(),
                })
            } else {
                Ok(response(1, 1))
            }
        }
    }

    fn flaky_backends(model: Arc<Flaky>) -> Backends {
        let mut b = Backends::new().with_retry(RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(1),
        });
        b.register(BackendProfile::mock(ModelTier::Cloud, "llm", 0.0, 0.0), model)
            .unwrap();
        b
    }

    #[test]
    fn transport_errors_retry_up_to_three_attempts() {
        let req = ChatRequest::new(Prompt::user("x"));
        let model = Arc::new(Flaky { failures: 2, calls: AtomicU32::new(0), decode: false });
        assert!(flaky_backends(model.clone()).complete(ModelTier::Cloud, &req).is_ok());
        assert_eq!(model.calls.load(Ordering::SeqCst), 3);

        let model = Arc::new(Flaky { failures: 10, calls: AtomicU32::new(0), decode: false });
        match flaky_backends(model.clone()).complete(ModelTier::Cloud, &req) {
            Err(BackendError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("expected transport error, got {other:?}"),
        }
        assert_eq!(model.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn decode_errors_are_not_retried() {
        let req = ChatRequest::new(Prompt::user("x"));
        let model = Arc::new(Flaky { failures: 0, calls: AtomicU32::new(0), decode: true });
        let err = flaky_backends(model.clone()).complete(ModelTier::Cloud, &req).unwrap_err();
        assert!(!err.is_retryable());
        assert_eq!(model.calls.load(Ordering::SeqCst), 1);
    }

    struct Counting {
        current: AtomicU32,
        peak: AtomicU32,
    }

    impl LanguageModel for Counting {
        fn endpoint(&self) -> &str {
            "counting"
        }

        fn complete(&self, _request: &ChatRequest) -> Result<ChatResponse, BackendError> {
            let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            thread::sleep(Duration::from_millis(5));
            self.current.fetch_sub(1, Ordering::SeqCst);
            Ok(response(1, 1))
        }
    }

    #[test]
    fn in_flight_calls_are_bounded() {
        let model = Arc::new(Counting { current: AtomicU32::new(0), peak: AtomicU32::new(0) });
        let mut profile = BackendProfile::mock(ModelTier::Device, "slm", 0.0, 0.0);
        profile.max_in_flight = 2;
        let mut b = Backends::new();
        b.register(profile, model.clone()).unwrap();
        let req = ChatRequest::new(Prompt::user("x"));
        thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| b.complete(ModelTier::Device, &req).unwrap());
            }
        });
        assert!(model.peak.load(Ordering::SeqCst) <= 2);
    }

    #[test]
    fn profiles_file_resolves_mock_scripts() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("s.json"), serde_json::to_string(&script()).unwrap()).unwrap();
        let profiles = r#"{
            "device": {"endpoint": "mock", "model_name": "slm", "mock_script": "s.json"},
            "cloud": {"endpoint": "mock", "model_name": "llm", "mock_script": "s.json",
                      "price_per_prompt_token_cents": 0.001, "price_per_completion_token_cents": 0.002}
        }"#;
        let path = dir.path().join("backends.json");
        fs::write(&path, profiles).unwrap();
        let b = Backends::from_profiles_file(&path, 1).unwrap();
        assert_eq!(b.profile(ModelTier::Cloud).unwrap().tier, ModelTier::Cloud);
        assert_eq!(b.profile(ModelTier::Cloud).unwrap().price_per_completion_token_cents, 0.002);
        assert_eq!(b.profile(ModelTier::Device).unwrap().tier, ModelTier::Device);
    }
}
