//! JSON-over-HTTP adapters for caption and summarization backends, plus
//! deterministic offline mocks.
//!
//! Wire protocol:
//!
//! ```text
//! POST {endpoint}/caption    {"image_b64": "...", "prompt": "..."} -> {"text": "..."}
//! POST {endpoint}/summarize  {"prompt": "..."}                      -> {"text": "..."}
//! ```
//!
//! Timeouts, connection failures and 5xx responses are transient and retried;
//! 4xx responses are permanent.

use std::thread;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::io::sha256_hex;

pub const CAPTION_URL_ENV: &str = "BI_CAPTION_URL";
pub const LLM_URL_ENV: &str = "BI_LLM_URL";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProviderError {
    #[error("transient provider failure: {0}")]
    Transient(String),
    #[error("provider rejected request with status {status}: {body}")]
    Permanent { status: u16, body: String },
}

impl ProviderError {
    pub fn is_transient(&self) -> bool {
        matches!(self, ProviderError::Transient(_))
    }
}

#[derive(Deserialize)]
struct TextResponse {
    text: String,
}

/// Blocking POST client with retry on transient failures.
#[derive(Clone, Debug)]
pub struct HttpJsonClient {
    client: reqwest::blocking::Client,
    endpoint: String,
    retries: u32,
    backoff_ms: u64,
}

impl HttpJsonClient {
    pub fn new(endpoint: &str, timeout_ms: u64, retries: u32, backoff_ms: u64) -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(timeout_ms))
            .build()
            .map_err(|e| ProviderError::Transient(e.to_string()))?;
        Ok(Self { client, endpoint: endpoint.trim_end_matches('/').to_owned(), retries, backoff_ms })
    }

    pub fn post_text(&self, path: &str, body: &serde_json::Value) -> Result<String, ProviderError> {
        let url = format!("{}/{}", self.endpoint, path.trim_start_matches('/'));
        let mut last = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                thread::sleep(Duration::from_millis(self.backoff_ms.saturating_mul(1 << (attempt - 1).min(16))));
            }
            match self.client.post(&url).json(body).send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        return resp
                            .json::<TextResponse>()
                            .map(|r| r.text)
                            .map_err(|e| ProviderError::Permanent { status: status.as_u16(), body: e.to_string() });
                    }
                    let text = resp.text().unwrap_or_default();
                    if status.is_server_error() || status.as_u16() == 429 {
                        last = format!("status {status}: {text}");
                    } else {
                        return Err(ProviderError::Permanent { status: status.as_u16(), body: text });
                    }
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(ProviderError::Transient(format!("{url}: {last}")))
    }
}

/// Image-to-text backend.
pub trait CaptionBackend: Send + Sync {
    fn model_name(&self) -> &str;
    fn caption(&self, image: &[u8], prompt: &str) -> Result<String, ProviderError>;
}

/// Summarization backend.
pub trait LlmBackend: Send + Sync {
    fn model_name(&self) -> &str;
    fn summarize(&self, prompt: &str) -> Result<String, ProviderError>;
}

/// Provider configuration as it appears in run configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ProviderConfig {
    Http {
        endpoint: String,
        model_name: String,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
        #[serde(default = "default_retries")]
        retries: u32,
        #[serde(default = "default_backoff_ms")]
        backoff_ms: u64,
    },
    Mock {
        #[serde(default = "default_mock_name")]
        model_name: String,
    },
}

fn default_timeout_ms() -> u64 {
    60_000
}
fn default_retries() -> u32 {
    2
}
fn default_backoff_ms() -> u64 {
    250
}
fn default_mock_name() -> String {
    "mock".into()
}

impl ProviderConfig {
    pub fn mock() -> Self {
        ProviderConfig::Mock { model_name: default_mock_name() }
    }

    pub fn http(endpoint: impl Into<String>, model_name: impl Into<String>) -> Self {
        ProviderConfig::Http {
            endpoint: endpoint.into(),
            model_name: model_name.into(),
            timeout_ms: default_timeout_ms(),
            retries: default_retries(),
            backoff_ms: default_backoff_ms(),
        }
    }

    pub fn model_name(&self) -> &str {
        match self {
            ProviderConfig::Http { model_name, .. } | ProviderConfig::Mock { model_name } => model_name,
        }
    }

    fn client(&self) -> Result<Option<HttpJsonClient>, ProviderError> {
        match self {
            ProviderConfig::Http { endpoint, timeout_ms, retries, backoff_ms, .. } => {
                HttpJsonClient::new(endpoint, *timeout_ms, *retries, *backoff_ms).map(Some)
            }
            ProviderConfig::Mock { .. } => Ok(None),
        }
    }

    pub fn caption_backend(&self) -> Result<Box<dyn CaptionBackend>, ProviderError> {
        let name = self.model_name().to_owned();
        Ok(match self.client()? {
            Some(client) => Box::new(HttpCaptioner { client, model_name: name }),
            None => Box::new(MockCaptioner { model_name: name }),
        })
    }

    pub fn llm_backend(&self) -> Result<Box<dyn LlmBackend>, ProviderError> {
        let name = self.model_name().to_owned();
        Ok(match self.client()? {
            Some(client) => Box::new(HttpLlm { client, model_name: name }),
            None => Box::new(MockLlm { model_name: name }),
        })
    }
}

pub struct HttpCaptioner {
    client: HttpJsonClient,
    model_name: String,
}

impl HttpCaptioner {
    pub fn new(client: HttpJsonClient, model_name: impl Into<String>) -> Self {
        Self { client, model_name: model_name.into() }
    }
}

impl CaptionBackend for HttpCaptioner {
    fn model_name(&self) -> &str {
        &self.model_name
    }

    fn caption(&self, image: &[u8], prompt: &str) -> Result<String, ProviderError> {
        let image_b64 = base64::engine::general_purpose::STANDARD.encode(image);
        self.client.post_text("caption", &json!({ "image_b64": image_b64, "prompt": prompt }))
    }
}

pub struct HttpLlm {
    client: HttpJsonClient,
    model_name: String,
}

impl HttpLlm {
    pub fn new(client: HttpJsonClient, model_name: impl Into<String>) -> Self {
        Self { client, model_name: model_name.into() }
    }
}

impl LlmBackend for HttpLlm {
    fn model_name(&self) -> &str {
        &self.model_name
    }

    fn summarize(&self, prompt: &str) -> Result<String, ProviderError> {
        self.client.post_text("summarize", &json!({ "prompt": prompt }))
    }
}

/// Caption is a function of the image bytes only.
#[derive(Clone, Debug)]
pub struct MockCaptioner {
    pub model_name: String,
}

impl Default for MockCaptioner {
    fn default() -> Self {
        Self { model_name: default_mock_name() }
    }
}

impl CaptionBackend for MockCaptioner {
    fn model_name(&self) -> &str {
        &self.model_name
    }

    fn caption(&self, image: &[u8], _prompt: &str) -> Result<String, ProviderError> {
        Ok(format!("MOCK CAPTION {}: scene description", &sha256_hex(image)[..8]))
    }
}

/// Returns the first 60 words of the description lines (everything after the
/// prompt's first line), quotes stripped, as one paragraph.
#[derive(Clone, Debug)]
pub struct MockLlm {
    pub model_name: String,
}

impl Default for MockLlm {
    fn default() -> Self {
        Self { model_name: default_mock_name() }
    }
}

pub const MOCK_SUMMARY_WORDS: usize = 60;

impl LlmBackend for MockLlm {
    fn model_name(&self) -> &str {
        &self.model_name
    }

    fn summarize(&self, prompt: &str) -> Result<String, ProviderError> {
        let body = prompt.split_once('\n').map_or("", |(_, rest)| rest);
        let words: Vec<&str> = body
            .lines()
            .map(|l| l.trim().trim_matches('"'))
            .flat_map(str::split_whitespace)
            .take(MOCK_SUMMARY_WORDS)
            .collect();
        Ok(words.join(" "))
    }
}
