//! Judge backed by an OpenAI-compatible chat-completions endpoint.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use crate::judge::{sanitize_reply, Judge, JudgeError, SamplingParams};

/// Environment variable holding the bearer token for the judge endpoint.
/// Read at request time and never persisted.
pub const API_KEY_ENV: &str = "JUDGE_API_KEY";

/// Connection settings for a remote judge.
#[derive(Debug, Clone)]
pub struct RemoteConfig {
    /// Base URL up to and including the API root, e.g. `http://host:8000/v1`.
    pub endpoint: String,
    pub model: String,
    pub max_retries: usize,
    pub timeout: Duration,
    /// First backoff delay; doubles per retry.
    pub backoff: Duration,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1".into(),
            model: "Qwen3-32B".into(),
            max_retries: 3,
            timeout: Duration::from_secs(120),
            backoff: Duration::from_millis(200),
        }
    }
}

#[derive(Deserialize)]
struct ChatCompletion {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: String,
}

/// Blocking chat-completions client with retry and exponential backoff.
/// Replies are sanitized (reasoning preambles and code fences stripped)
/// before they reach the parsers.
pub struct RemoteJudge {
    config: RemoteConfig,
    client: reqwest::blocking::Client,
}

impl RemoteJudge {
    pub fn new(config: RemoteConfig) -> Result<Self, JudgeError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| JudgeError::Transport(e.to_string()))?;
        Ok(Self { config, client })
    }

    fn request_once(&self, prompt: &str, params: &SamplingParams) -> Result<String, JudgeError> {
        let url = format!("{}/chat/completions", self.config.endpoint.trim_end_matches('/'));
        let body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        });
        let mut request = self.client.post(&url).json(&body);
        if let Ok(key) = std::env::var(API_KEY_ENV) {
            if !key.is_empty() {
                request = request.bearer_auth(key);
            }
        }
        let response = request
            .send()
            .map_err(|e| JudgeError::Transport(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            return Err(JudgeError::HttpStatus(status.as_u16()));
        }
        let completion: ChatCompletion = response
            .json()
            .map_err(|e| JudgeError::BadPayload(e.to_string()))?;
        let content = completion
            .choices
            .first()
            .map(|c| c.message.content.clone())
            .ok_or_else(|| JudgeError::BadPayload("empty choices".into()))?;
        Ok(sanitize_reply(&content))
    }

    fn retryable(error: &JudgeError) -> bool {
        match error {
            JudgeError::Transport(_) => true,
            JudgeError::HttpStatus(status) => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

impl Judge for RemoteJudge {
    fn complete(&self, prompt: &str, params: &SamplingParams) -> Result<String, JudgeError> {
        let mut delay = self.config.backoff;
        let mut last = None;
        for attempt in 0..self.config.max_retries.max(1) {
            match self.request_once(prompt, params) {
                Ok(reply) => return Ok(reply),
                Err(e) if Self::retryable(&e) => {
                    last = Some(e);
                    if attempt + 1 < self.config.max_retries {
                        std::thread::sleep(delay);
                        delay *= 2;
                    }
                }
                Err(e) => return Err(e),
            }
        }
        Err(last.unwrap_or_else(|| JudgeError::Transport("no attempts made".into())))
    }
}
