//! Language-model client abstraction with access to per-token probabilities.
//!
//! Backends: an OpenAI-compatible HTTP client, scripted and closure stubs, and
//! cassette record/replay. Everything except [`HttpLlm`] is deterministic and
//! offline.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::LlmError;

pub const CASSETTE_SCHEMA: &str = "irda-cassette/1";
pub const ENV_BASE_URL: &str = "IRDA_LLM_BASE_URL";
pub const ENV_API_KEY: &str = "IRDA_LLM_API_KEY";
pub const ENV_MODEL: &str = "IRDA_LLM_MODEL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub system_text: String,
    pub user_text: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub top_logprobs: u8,
}

impl LlmRequest {
    pub fn new(system_text: impl Into<String>, user_text: impl Into<String>) -> Self {
        Self {
            system_text: system_text.into(),
            user_text: user_text.into(),
            temperature: 0.0,
            max_tokens: 1024,
            top_logprobs: 10,
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(LlmError::InvalidRequest(format!("temperature {} must be >= 0", self.temperature)));
        }
        if self.top_logprobs < 2 {
            return Err(LlmError::InvalidRequest("top_logprobs must be at least 2".into()));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_tokens must be at least 1".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 over a length-prefixed encoding of every field.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"irda-llm-request/1");
        for part in [self.system_text.as_bytes(), self.user_text.as_bytes()] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part);
        }
        h.update(self.temperature.to_bits().to_le_bytes());
        h.update(self.max_tokens.to_le_bytes());
        h.update([self.top_logprobs]);
        hex::encode(h.finalize())
    }
}

/// One generated token and the top alternatives reported for its position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenPosition {
    /// Byte offset of the token in [`Completion::text`].
    pub offset: usize,
    pub token: String,
    pub alternatives: BTreeMap<String, f64>,
}

impl TokenPosition {
    pub fn covers(&self, byte: usize) -> bool {
        self.offset <= byte && byte < self.offset + self.token.len().max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub token_probs: Vec<TokenPosition>,
}

impl Completion {
    /// Completion without probability information.
    pub fn text_only(text: impl Into<String>) -> Self {
        Self { text: text.into(), token_probs: Vec::new() }
    }

    /// `text` with a single probability position placed on the word following
    /// the last `ANSWER:` marker. Without a marker the position sits at the end.
    pub fn with_answer(text: impl Into<String>, probs: &[(&str, f64)]) -> Self {
        let text = text.into();
        let offset = match text.rfind("ANSWER:") {
            Some(i) => {
                let after = i + "ANSWER:".len();
                after + (text[after..].len() - text[after..].trim_start().len())
            }
            None => text.len(),
        };
        let token = text[offset..].split_whitespace().next().unwrap_or("").to_string();
        let alternatives = probs.iter().map(|(t, p)| (t.to_string(), *p)).collect();
        Self {
            text,
            token_probs: vec![TokenPosition { offset, token, alternatives }],
        }
    }

    pub fn position_covering(&self, byte: usize) -> Option<&TokenPosition> {
        self.token_probs.iter().find(|p| p.covers(byte))
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        for p in &self.token_probs {
            if p.alternatives.values().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(LlmError::InvalidRequest(format!("probability outside [0, 1] at offset {}", p.offset)));
            }
            if p.alternatives.values().sum::<f64>() > 1.0 + 1e-6 {
                return Err(LlmError::InvalidRequest(format!("probabilities at offset {} sum above 1", p.offset)));
            }
        }
        Ok(())
    }
}

/// A chat model that reports token probabilities. Implementations are shared across threads.
pub trait LanguageModel: Send + Sync {
    fn complete(&self, request: &LlmRequest) -> Result<Completion, LlmError>;
}

impl<T: LanguageModel + ?Sized> LanguageModel for std::sync::Arc<T> {
    fn complete(&self, request: &LlmRequest) -> Result<Completion, LlmError> {
        (**self).complete(request)
    }
}

impl<T: LanguageModel + ?Sized> LanguageModel for &T {
    fn complete(&self, request: &LlmRequest) -> Result<Completion, LlmError> {
        (**self).complete(request)
    }
}

/// Responses looked up by request fingerprint.
#[derive(Debug, Default, Clone)]
pub struct ScriptedLlm {
    responses: HashMap<String, Completion>,
}

impl ScriptedLlm {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, request: &LlmRequest, completion: Completion) {
        self.responses.insert(request.fingerprint(), completion);
    }
}

impl LanguageModel for ScriptedLlm {
    fn complete(&self, request: &LlmRequest) -> Result<Completion, LlmError> {
        request.validate()?;
        let fp = request.fingerprint();
        self.responses.get(&fp).cloned().ok_or(LlmError::UnknownFingerprint(fp))
    }
}

/// Responses computed by a closure.
pub struct FnLlm<F>(pub F);

impl<F> LanguageModel for FnLlm<F>
where
    F: Fn(&LlmRequest) -> Result<Completion, LlmError> + Send + Sync,
{
    fn complete(&self, request: &LlmRequest) -> Result<Completion, LlmError> {
        request.validate()?;
        (self.0)(request)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CassetteRecord {
    schema: String,
    fingerprint: String,
    request: LlmRequest,
    completion: Completion,
}

/// Serves recorded completions; unknown requests fail.
#[derive(Debug, Clone, Default)]
pub struct ReplayLlm {
    responses: HashMap<String, Completion>,
}

impl ReplayLlm {
    pub fn from_path(path: &Path) -> Result<Self, LlmError> {
        let file = File::open(path).map_err(|e| LlmError::Cassette(format!("{}: {e}", path.display())))?;
        Self::from_reader(BufReader::new(file))
    }

    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self, LlmError> {
        let mut responses = HashMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| LlmError::Cassette(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CassetteRecord =
                serde_json::from_str(&line).map_err(|e| LlmError::Cassette(format!("line {}: {e}", i + 1)))?;
            if rec.schema != CASSETTE_SCHEMA {
                return Err(LlmError::Cassette(format!("line {}: unsupported schema `{}`", i + 1, rec.schema)));
            }
            responses.insert(rec.fingerprint, rec.completion);
        }
        Ok(Self { responses })
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl LanguageModel for ReplayLlm {
    fn complete(&self, request: &LlmRequest) -> Result<Completion, LlmError> {
        let fp = request.fingerprint();
        self.responses.get(&fp).cloned().ok_or(LlmError::UnknownFingerprint(fp))
    }
}

/// Forwards to an inner model and appends every successful exchange to a cassette.
pub struct RecordingLlm<M> {
    inner: M,
    out: Mutex<File>,
}

impl<M: LanguageModel> RecordingLlm<M> {
    pub fn new(inner: M, path: &Path) -> Result<Self, LlmError> {
        let out = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| LlmError::Cassette(format!("{}: {e}", path.display())))?;
        Ok(Self { inner, out: Mutex::new(out) })
    }
}

impl<M: LanguageModel> LanguageModel for RecordingLlm<M> {
    fn complete(&self, request: &LlmRequest) -> Result<Completion, LlmError> {
        let completion = self.inner.complete(request)?;
        let rec = CassetteRecord {
            schema: CASSETTE_SCHEMA.to_string(),
            fingerprint: request.fingerprint(),
            request: request.clone(),
            completion: completion.clone(),
        };
        let mut line = serde_json::to_string(&rec).map_err(|e| LlmError::Cassette(e.to_string()))?;
        line.push('\n');
        let mut out = self.out.lock().unwrap_or_else(|p| p.into_inner());
        out.write_all(line.as_bytes()).map_err(|e| LlmError::Cassette(e.to_string()))?;
        out.flush().map_err(|e| LlmError::Cassette(e.to_string()))?;
        Ok(completion)
    }
}

/// Client-level token bucket.
#[derive(Debug)]
pub struct RateLimiter {
    rate: f64,
    burst: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn new(requests_per_second: f64) -> Self {
        let burst = requests_per_second.max(1.0);
        Self {
            rate: requests_per_second,
            burst,
            state: Mutex::new((burst, Instant::now())),
        }
    }

    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut s = self.state.lock().unwrap_or_else(|p| p.into_inner());
                let now = Instant::now();
                s.0 = (s.0 + now.duration_since(s.1).as_secs_f64() * self.rate).min(self.burst);
                s.1 = now;
                if s.0 >= 1.0 {
                    s.0 -= 1.0;
                    return;
                }
                (1.0 - s.0) / self.rate
            };
            std::thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpConfig {
    /// Base URL up to and including the API version, e.g. `https://host/v1`.
    pub base_url: String,
    pub api_key: String,
    pub model: String,
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub requests_per_second: f64,
    pub timeout: Duration,
}

impl HttpConfig {
    pub fn from_env() -> Result<Self, LlmError> {
        let var = |k: &str| std::env::var(k).map_err(|_| LlmError::Config(format!("{k} is not set")));
        Ok(Self {
            base_url: var(ENV_BASE_URL)?,
            api_key: var(ENV_API_KEY)?,
            model: var(ENV_MODEL)?,
            ..Self::default()
        })
    }
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            base_url: String::new(),
            api_key: String::new(),
            model: String::new(),
            max_attempts: 3,
            initial_backoff: Duration::from_millis(500),
            requests_per_second: 5.0,
            timeout: Duration::from_secs(120),
        }
    }
}

/// OpenAI-compatible `/chat/completions` client with log-probabilities enabled.
pub struct HttpLlm {
    config: HttpConfig,
    client: reqwest::blocking::Client,
    limiter: RateLimiter,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceLogprobs {
    content: Option<Vec<TokenLogprob>>,
}

#[derive(Deserialize)]
struct TokenLogprob {
    token: String,
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<TopLogprob>,
}

#[derive(Deserialize)]
struct TopLogprob {
    token: String,
    logprob: f64,
}

impl HttpLlm {
    pub fn new(config: HttpConfig) -> Result<Self, LlmError> {
        if config.base_url.is_empty() || config.model.is_empty() {
            return Err(LlmError::Config("base URL and model are required".into()));
        }
        if config.max_attempts == 0 {
            return Err(LlmError::Config("max_attempts must be at least 1".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| LlmError::Config(e.to_string()))?;
        let limiter = RateLimiter::new(config.requests_per_second);
        Ok(Self { config, client, limiter })
    }

    pub fn from_env() -> Result<Self, LlmError> {
        Self::new(HttpConfig::from_env()?)
    }

    fn attempt(&self, request: &LlmRequest) -> Result<Completion, LlmError> {
        self.limiter.acquire();
        let body = json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": request.user_text},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "logprobs": true,
            "top_logprobs": request.top_logprobs,
        });
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let resp = self
            .client
            .post(url)
            .bearer_auth(&self.config.api_key)
            .json(&body)
            .send()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(LlmError::BadCredential);
        }
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(LlmError::Transport(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(LlmError::InvalidRequest(format!("HTTP {status}: {text}")));
        }
        let parsed: ChatResponse = resp.json().map_err(|e| LlmError::Transport(format!("bad response body: {e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| LlmError::Transport("response has no choices".into()))?;
        let tokens = choice
            .logprobs
            .and_then(|l| l.content)
            .filter(|c| !c.is_empty())
            .ok_or(LlmError::NoLogprobsAvailable)?;
        let mut offset = 0;
        let mut token_probs = Vec::with_capacity(tokens.len());
        for t in tokens {
            let mut alternatives: BTreeMap<String, f64> =
                t.top_logprobs.into_iter().map(|a| (a.token, a.logprob.exp())).collect();
            alternatives.entry(t.token.clone()).or_insert(t.logprob.exp());
            let len = t.token.len();
            token_probs.push(TokenPosition { offset, token: t.token, alternatives });
            offset += len;
        }
        Ok(Completion {
            text: choice.message.content.unwrap_or_default(),
            token_probs,
        })
    }
}

impl LanguageModel for HttpLlm {
    fn complete(&self, request: &LlmRequest) -> Result<Completion, LlmError> {
        request.validate()?;
        let mut delay = self.config.initial_backoff;
        let mut last = LlmError::Transport("no attempt made".into());
        for attempt in 0..self.config.max_attempts {
            if attempt > 0 {
                std::thread::sleep(delay);
                delay *= 2;
            }
            match self.attempt(request) {
                Err(e) if e.is_retryable() => {
                    tracing::warn!(attempt = attempt + 1, error = %e, "LLM request failed");
                    last = e;
                }
                other => return other,
            }
        }
        Err(last)
    }
}
