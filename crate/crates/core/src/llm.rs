//! Candidate generation behind a provider trait.
//!
//! Three providers exist: an OpenAI-compatible chat-completions client, a
//! scripted stub for engineering funnel outcomes in tests, and a replay
//! cassette for reproducible evaluation. [`Recorder`] wraps any provider and
//! appends every call to a cassette.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Http,
    Stub,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmConfig {
    pub model_id: String,
    pub temperature: f64,
    pub samples_per_prompt: u32,
    pub max_tokens: u32,
    pub provider: ProviderKind,
}

impl LlmConfig {
    pub fn new(model_id: impl Into<String>, provider: ProviderKind) -> Self {
        Self {
            model_id: model_id.into(),
            temperature: 0.0,
            samples_per_prompt: 1,
            max_tokens: 4096,
            provider,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    /// Temperature rendered with one decimal, the granularity of the sweep.
    pub fn temperature_label(&self) -> String {
        format!("{:.1}", self.temperature)
    }
}

/// `sweep = false` → `[base]`; otherwise eleven copies of `base` at
/// temperatures 0.0, 0.1, …, 1.0.
pub fn sweep_configs(base: &LlmConfig, sweep: bool) -> Vec<LlmConfig> {
    if !sweep {
        return vec![base.clone()];
    }
    (0..=10)
        .map(|tenths| base.clone().with_temperature(f64::from(tenths) / 10.0))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub prompt_text: String,
    pub responses: Vec<String>,
    pub config: LlmConfig,
    pub latency_ms: u64,
    pub request_id: String,
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("provider timed out after {attempts} attempt(s)")]
    ProviderTimeout { attempts: u32 },
    #[error("provider returned HTTP {status}: {body}")]
    ProviderError { status: u16, body: String },
    #[error("provider unreachable after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("malformed provider response: {0}")]
    MalformedResponse(String),
    #[error("cassette has no recording for prompt {prompt_sha256} (model {model_id}, temperature {temperature})")]
    CassetteMiss {
        prompt_sha256: String,
        model_id: String,
        temperature: String,
    },
    #[error("stub script has no rule matching the prompt")]
    ScriptMiss,
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
}

pub trait LlmProvider: Send + Sync {
    fn generate(&self, prompt: &str, config: &LlmConfig) -> Result<GenerationResult, LlmError>;
}

pub fn prompt_sha256(prompt: &str) -> String {
    let digest = Sha256::digest(prompt.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn deterministic_request_id(prompt: &str, config: &LlmConfig) -> String {
    let key = format!(
        "{}\u{0}{}\u{0}{}",
        prompt,
        config.model_id,
        config.temperature_label()
    );
    prompt_sha256(&key)[..16].to_string()
}

fn file_error(path: &Path, err: impl std::fmt::Display) -> LlmError {
    LlmError::File {
        path: path.to_path_buf(),
        message: err.to_string(),
    }
}

/// Model-provider section of the manifest's backend block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmSettings {
    pub provider: ProviderKind,
    pub default_model: String,
    pub max_tokens: u32,
    pub samples_per_prompt: u32,
    #[serde(flatten)]
    pub http: HttpSettings,
    pub stub_script: Option<PathBuf>,
    pub cassette: Option<PathBuf>,
    /// Append every provider call to `cassette` instead of replaying it.
    pub record: bool,
}

impl Default for LlmSettings {
    fn default() -> Self {
        Self {
            provider: ProviderKind::Http,
            default_model: "LLM2".to_string(),
            max_tokens: 4096,
            samples_per_prompt: 1,
            http: HttpSettings::default(),
            stub_script: None,
            cassette: None,
            record: false,
        }
    }
}

impl LlmSettings {
    pub fn config_for(&self, model_id: &str) -> LlmConfig {
        LlmConfig {
            model_id: model_id.to_string(),
            temperature: 0.0,
            samples_per_prompt: self.samples_per_prompt.max(1),
            max_tokens: self.max_tokens,
            provider: self.provider,
        }
    }
}

// ---------------------------------------------------------------------------
// Stub

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMatcher {
    Any,
    Exact(String),
    /// The prompt contains this text. Handy for keying rules on a class name.
    Contains(String),
}

impl PromptMatcher {
    fn matches(&self, prompt: &str) -> bool {
        match self {
            PromptMatcher::Any => true,
            PromptMatcher::Exact(text) => prompt == text,
            PromptMatcher::Contains(text) => prompt.contains(text.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StubRule {
    #[serde(rename = "match")]
    pub matcher: PromptMatcher,
    /// Restricts the rule to one model id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    /// Restricts the rule to one temperature (compared at one decimal).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    pub responses: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StubScript {
    pub rules: Vec<StubRule>,
}

/// Returns the responses of the first rule matching prompt and config,
/// truncated to `samples_per_prompt`.
#[derive(Debug, Default)]
pub struct StubProvider {
    script: StubScript,
    calls: AtomicUsize,
}

impl StubProvider {
    pub fn new(script: StubScript) -> Self {
        Self {
            script,
            calls: AtomicUsize::new(0),
        }
    }

    /// Every prompt gets `response`.
    pub fn fixed(response: impl Into<String>) -> Self {
        Self::new(StubScript {
            rules: vec![StubRule {
                matcher: PromptMatcher::Any,
                model_id: None,
                temperature: None,
                responses: vec![response.into()],
            }],
        })
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path).map_err(|e| file_error(path, e))?;
        let script = serde_json::from_str(&text).map_err(|e| file_error(path, e))?;
        Ok(Self::new(script))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl LlmProvider for StubProvider {
    fn generate(&self, prompt: &str, config: &LlmConfig) -> Result<GenerationResult, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let rule = self
            .script
            .rules
            .iter()
            .find(|rule| {
                rule.matcher.matches(prompt)
                    && rule.model_id.as_ref().is_none_or(|m| *m == config.model_id)
                    && rule
                        .temperature
                        .is_none_or(|t| format!("{t:.1}") == config.temperature_label())
            })
            .ok_or(LlmError::ScriptMiss)?;
        Ok(GenerationResult {
            prompt_text: prompt.to_string(),
            responses: rule
                .responses
                .iter()
                .take(config.samples_per_prompt as usize)
                .cloned()
                .collect(),
            config: config.clone(),
            latency_ms: 0,
            request_id: deterministic_request_id(prompt, config),
        })
    }
}

// ---------------------------------------------------------------------------
// Cassettes

/// One line of a cassette file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteRecord {
    pub prompt_sha256: String,
    pub config: LlmConfig,
    pub responses: Vec<String>,
}

type CassetteKey = (String, String, String);

fn cassette_key(prompt_sha256: &str, config: &LlmConfig) -> CassetteKey {
    (
        prompt_sha256.to_string(),
        config.model_id.clone(),
        config.temperature_label(),
    )
}

/// Serves recorded responses keyed by prompt hash, model id and
/// temperature. The first record for a key wins.
#[derive(Debug, Default)]
pub struct ReplayProvider {
    records: HashMap<CassetteKey, Vec<String>>,
}

impl ReplayProvider {
    pub fn from_records(records: impl IntoIterator<Item = CassetteRecord>) -> Self {
        let mut map = HashMap::new();
        for record in records {
            map.entry(cassette_key(&record.prompt_sha256, &record.config))
                .or_insert(record.responses);
        }
        Self { records: map }
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let file = File::open(path).map_err(|e| file_error(path, e))?;
        let mut records = Vec::new();
        for (index, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| file_error(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: CassetteRecord = serde_json::from_str(&line)
                .map_err(|e| file_error(path, format!("line {}: {e}", index + 1)))?;
            records.push(record);
        }
        Ok(Self::from_records(records))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl LlmProvider for ReplayProvider {
    fn generate(&self, prompt: &str, config: &LlmConfig) -> Result<GenerationResult, LlmError> {
        let sha = prompt_sha256(prompt);
        let key = cassette_key(&sha, config);
        let responses = self
            .records
            .get(&key)
            .ok_or_else(|| LlmError::CassetteMiss {
                prompt_sha256: sha.clone(),
                model_id: config.model_id.clone(),
                temperature: config.temperature_label(),
            })?;
        Ok(GenerationResult {
            prompt_text: prompt.to_string(),
            responses: responses
                .iter()
                .take(config.samples_per_prompt as usize)
                .cloned()
                .collect(),
            config: config.clone(),
            latency_ms: 0,
            request_id: sha[..16].to_string(),
        })
    }
}

/// Appends one cassette record per successful call. Each record is written
/// with a single `write_all` under a lock, so concurrent callers never
/// interleave lines.
pub struct Recorder<P> {
    inner: P,
    sink: Mutex<File>,
}

impl<P: LlmProvider> Recorder<P> {
    pub fn new(inner: P, cassette: &Path) -> Result<Self, LlmError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(cassette)
            .map_err(|e| file_error(cassette, e))?;
        Ok(Self {
            inner,
            sink: Mutex::new(file),
        })
    }
}

impl<P: LlmProvider> LlmProvider for Recorder<P> {
    fn generate(&self, prompt: &str, config: &LlmConfig) -> Result<GenerationResult, LlmError> {
        let result = self.inner.generate(prompt, config)?;
        let record = CassetteRecord {
            prompt_sha256: prompt_sha256(prompt),
            config: config.clone(),
            responses: result.responses.clone(),
        };
        let mut line = serde_json::to_string(&record).expect("cassette record serializes");
        line.push('\n');
        let mut sink = self.sink.lock().unwrap_or_else(|e| e.into_inner());
        sink.write_all(line.as_bytes())
            .and_then(|_| sink.flush())
            .map_err(|e| LlmError::File {
                path: PathBuf::from("<cassette>"),
                message: e.to_string(),
            })?;
        Ok(result)
    }
}

impl<T: LlmProvider + ?Sized> LlmProvider for Box<T> {
    fn generate(&self, prompt: &str, config: &LlmConfig) -> Result<GenerationResult, LlmError> {
        (**self).generate(prompt, config)
    }
}

impl<T: LlmProvider + ?Sized> LlmProvider for std::sync::Arc<T> {
    fn generate(&self, prompt: &str, config: &LlmConfig) -> Result<GenerationResult, LlmError> {
        (**self).generate(prompt, config)
    }
}

// ---------------------------------------------------------------------------
// HTTP

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpSettings {
    /// Base URL or full chat-completions URL.
    pub endpoint: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_s: u64,
    pub max_attempts: u32,
    pub backoff_ms: u64,
}

impl Default for HttpSettings {
    fn default() -> Self {
        Self {
            endpoint: "http://localhost:8000/v1".to_string(),
            api_key_env: "OPENAI_API_KEY".to_string(),
            timeout_s: 120,
            max_attempts: 3,
            backoff_ms: 500,
        }
    }
}

/// OpenAI-compatible chat-completions client. Timeouts, transport
/// failures, 429 and 5xx responses are retried with exponential backoff.
pub struct HttpProvider {
    url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
    settings: HttpSettings,
}

impl HttpProvider {
    pub fn new(settings: HttpSettings) -> Self {
        let url = if settings
            .endpoint
            .trim_end_matches('/')
            .ends_with("/chat/completions")
        {
            settings.endpoint.clone()
        } else {
            format!(
                "{}/chat/completions",
                settings.endpoint.trim_end_matches('/')
            )
        };
        let api_key = std::env::var(&settings.api_key_env)
            .ok()
            .filter(|k| !k.is_empty());
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(settings.timeout_s))
            .build();
        Self {
            url,
            api_key,
            agent,
            settings,
        }
    }

    fn request_body(prompt: &str, config: &LlmConfig) -> serde_json::Value {
        json!({
            "model": config.model_id,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": config.temperature,
            "n": config.samples_per_prompt,
            "max_tokens": config.max_tokens,
        })
    }
}

#[derive(Deserialize)]
struct ChatCompletion {
    #[serde(default)]
    id: Option<String>,
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

enum Attempt {
    Retry(LlmError),
    Fatal(LlmError),
}

impl HttpProvider {
    fn attempt(&self, body: &serde_json::Value, attempts: u32) -> Result<ChatCompletion, Attempt> {
        let mut request = self
            .agent
            .post(&self.url)
            .set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            request = request.set("Authorization", &format!("Bearer {key}"));
        }
        match request.send_json(body.clone()) {
            Ok(response) => response
                .into_json::<ChatCompletion>()
                .map_err(|e| Attempt::Fatal(LlmError::MalformedResponse(e.to_string()))),
            Err(ureq::Error::Status(status, response)) => {
                let body = response.into_string().unwrap_or_default();
                let err = LlmError::ProviderError { status, body };
                if status == 429 || status >= 500 {
                    Err(Attempt::Retry(err))
                } else {
                    Err(Attempt::Fatal(err))
                }
            }
            Err(ureq::Error::Transport(transport)) => {
                let message = transport.to_string();
                if message.contains("timed out") || message.contains("Timeout") {
                    Err(Attempt::Retry(LlmError::ProviderTimeout { attempts }))
                } else {
                    Err(Attempt::Retry(LlmError::Transport { attempts, message }))
                }
            }
        }
    }
}

impl LlmProvider for HttpProvider {
    fn generate(&self, prompt: &str, config: &LlmConfig) -> Result<GenerationResult, LlmError> {
        let body = Self::request_body(prompt, config);
        let started = Instant::now();
        let max_attempts = self.settings.max_attempts.max(1);
        let mut attempt = 1;
        let completion = loop {
            match self.attempt(&body, attempt) {
                Ok(completion) => break completion,
                Err(Attempt::Fatal(err)) => return Err(err),
                Err(Attempt::Retry(err)) if attempt >= max_attempts => return Err(err),
                Err(Attempt::Retry(_)) => {
                    let delay = self
                        .settings
                        .backoff_ms
                        .saturating_mul(1 << (attempt - 1).min(16));
                    std::thread::sleep(Duration::from_millis(delay));
                    attempt += 1;
                }
            }
        };
        let responses: Vec<String> = completion
            .choices
            .into_iter()
            .take(config.samples_per_prompt as usize)
            .map(|choice| choice.message.content.unwrap_or_default())
            .collect();
        Ok(GenerationResult {
            prompt_text: prompt.to_string(),
            responses,
            config: config.clone(),
            latency_ms: started.elapsed().as_millis() as u64,
            request_id: completion
                .id
                .unwrap_or_else(|| deterministic_request_id(prompt, config)),
        })
    }
}
