//! Model providers: a deterministic offline stub and a remote inference client.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::template::RenderedPrompt;
use super::GenerationParams;
use crate::hash::Fnv64;

#[derive(Debug, Error, Clone, PartialEq, Serialize, Deserialize)]
#[error("model provider error: {message}")]
pub struct ProviderError {
    pub message: String,
    pub retryable: bool,
}

pub trait ModelProvider: Send + Sync {
    fn generate(&self, prompt: &RenderedPrompt, params: &GenerationParams) -> Result<String, ProviderError>;

    /// Number of generate calls served so far.
    fn calls(&self) -> u64 {
        0
    }
}

const STUB_WORDS: usize = 12;

/// Offline stand-in for a language model. Output is a pure function of the
/// rendered prompt, seed and model id:
/// `STUB(<16 hex digits>): <first 12 words of the last non-empty user line>`.
#[derive(Debug, Default)]
pub struct StubModel {
    calls: AtomicU64,
}

impl StubModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn output_for(prompt: &RenderedPrompt, params: &GenerationParams) -> String {
        let mut h = Fnv64::new();
        h.update_field(params.model_id.as_bytes())
            .update_field(prompt.system.as_bytes())
            .update_field(prompt.user.as_bytes())
            .update_field(prompt.primer.as_deref().unwrap_or("").as_bytes())
            .update(&params.seed.to_le_bytes());
        let last_line = prompt.user.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("");
        let words: Vec<&str> = last_line.split_whitespace().take(STUB_WORDS).collect();
        format!("STUB({:016x}): {}", h.finish(), words.join(" "))
    }
}

impl ModelProvider for StubModel {
    fn generate(&self, prompt: &RenderedPrompt, params: &GenerationParams) -> Result<String, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(Self::output_for(prompt, params))
    }

    fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

#[derive(Serialize)]
struct RemoteRequest<'a> {
    model_id: &'a str,
    system: &'a str,
    user: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    primer: Option<&'a str>,
    temperature: f64,
    seed: u64,
    max_new_tokens: u32,
}

#[derive(Deserialize)]
struct RemoteResponse {
    text: String,
}

/// Client for an inference server speaking
/// `POST {model_id, system, user, primer?, temperature, seed, max_new_tokens} -> {text}`.
/// Retryable failures are retried once.
pub struct RemoteModel {
    endpoint: String,
    client: reqwest::blocking::Client,
    calls: AtomicU64,
}

impl fmt::Debug for RemoteModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemoteModel").field("endpoint", &self.endpoint).finish()
    }
}

impl RemoteModel {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

    pub fn new(endpoint: impl Into<String>) -> Result<Self, ProviderError> {
        Self::with_timeout(endpoint, Self::DEFAULT_TIMEOUT)
    }

    pub fn with_timeout(endpoint: impl Into<String>, timeout: Duration) -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ProviderError {
                message: e.to_string(),
                retryable: false,
            })?;
        Ok(Self {
            endpoint: endpoint.into(),
            client,
            calls: AtomicU64::new(0),
        })
    }

    fn attempt(&self, prompt: &RenderedPrompt, params: &GenerationParams) -> Result<String, ProviderError> {
        let body = RemoteRequest {
            model_id: &params.model_id,
            system: &prompt.system,
            user: &prompt.user,
            primer: prompt.primer.as_deref(),
            temperature: params.temperature,
            seed: params.seed,
            max_new_tokens: params.max_new_tokens,
        };
        let response = self
            .client
            .post(&self.endpoint)
            .json(&body)
            .send()
            .map_err(|e| ProviderError {
                message: e.to_string(),
                retryable: e.is_timeout() || e.is_connect(),
            })?;
        let status = response.status();
        if !status.is_success() {
            return Err(ProviderError {
                message: format!("inference server returned {status}"),
                retryable: status.is_server_error() || status.as_u16() == 429,
            });
        }
        let parsed: RemoteResponse = response.json().map_err(|e| ProviderError {
            message: format!("undecodable inference response: {e}"),
            retryable: false,
        })?;
        Ok(parsed.text)
    }
}

impl ModelProvider for RemoteModel {
    fn generate(&self, prompt: &RenderedPrompt, params: &GenerationParams) -> Result<String, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        match self.attempt(prompt, params) {
            Err(e) if e.retryable => {
                tracing::warn!(error = %e.message, "retrying model request");
                self.attempt(prompt, params)
            }
            other => other,
        }
    }

    fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}
