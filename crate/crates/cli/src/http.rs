//! Chat-completions client for the `api` rewriting mode.

use std::time::Duration;

use ohd_core::countergen::{LlmClient, LlmConfig, LlmFailure, API_KEY_ENV};
use ohd_core::{Error, Result};
use serde_json::{json, Value};

/// Sends each prompt as a single user message and returns the first choice.
pub struct HttpLlmClient {
    agent: ureq::Agent,
    endpoint: String,
    model_id: String,
    api_key: String,
}

impl HttpLlmClient {
    pub fn new(cfg: &LlmConfig, api_key: String) -> Result<Self> {
        if cfg.endpoint.trim().is_empty() {
            return Err(Error::Validation("llm endpoint is empty".into()));
        }
        if !(cfg.timeout_s.is_finite() && cfg.timeout_s > 0.0) {
            return Err(Error::Validation(format!("llm timeout_s must be positive, got {}", cfg.timeout_s)));
        }
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs_f64(cfg.timeout_s))
            .build();
        Ok(Self {
            agent,
            endpoint: cfg.endpoint.clone(),
            model_id: cfg.model_id.clone(),
            api_key,
        })
    }

    /// Reads the key from `OHD_LLM_API_KEY`.
    pub fn from_env(cfg: &LlmConfig) -> Result<Self> {
        let key = std::env::var(API_KEY_ENV)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| Error::Llm(format!("{API_KEY_ENV} is not set")))?;
        Self::new(cfg, key)
    }
}

fn first_choice(body: &Value) -> Option<&str> {
    body.get("choices")?.get(0)?.get("message")?.get("content")?.as_str()
}

impl LlmClient for HttpLlmClient {
    fn send(&self, prompt: &str) -> std::result::Result<String, LlmFailure> {
        let request = json!({
            "model": self.model_id,
            "messages": [{ "role": "user", "content": prompt }],
            "temperature": 0,
        });
        let response = self
            .agent
            .post(&self.endpoint)
            .set("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(request);
        match response {
            Ok(resp) => {
                let body: Value = resp
                    .into_json()
                    .map_err(|e| LlmFailure::Transient(format!("reading response: {e}")))?;
                first_choice(&body)
                    .map(str::to_owned)
                    .ok_or_else(|| LlmFailure::Fatal("response has no choices[0].message.content".into()))
            }
            Err(ureq::Error::Status(code, _)) if code == 429 || code >= 500 => {
                Err(LlmFailure::Transient(format!("http status {code}")))
            }
            Err(ureq::Error::Status(code, _)) => Err(LlmFailure::Fatal(format!("http status {code}"))),
            Err(ureq::Error::Transport(t)) => Err(LlmFailure::Transient(t.to_string())),
        }
    }

    fn model_id(&self) -> &str {
        &self.model_id
    }
}
