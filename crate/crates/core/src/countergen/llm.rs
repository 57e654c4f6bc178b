use std::time::Duration;

use serde::{Deserialize, Serialize};

/// Environment variable holding the API key for hosted rewriting models.
pub const API_KEY_ENV: &str = "OHD_LLM_API_KEY";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LlmFailure {
    /// Worth retrying (timeouts, rate limits, 5xx).
    Transient(String),
    Fatal(String),
}

impl std::fmt::Display for LlmFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LlmFailure::Transient(m) => write!(f, "transient: {m}"),
            LlmFailure::Fatal(m) => write!(f, "fatal: {m}"),
        }
    }
}

/// A single-turn text completion endpoint.
pub trait LlmClient: Send + Sync {
    fn send(&self, prompt: &str) -> Result<String, LlmFailure>;
    fn model_id(&self) -> &str;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub endpoint: String,
    pub model_id: String,
    pub max_retries: u32,
    pub timeout_s: f64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model_id: "gpt-4".into(),
            max_retries: 3,
            timeout_s: 60.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        self.base_delay.saturating_mul(1u32 << attempt.min(16))
    }
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}
