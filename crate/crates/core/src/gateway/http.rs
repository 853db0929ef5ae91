//! HTTP provider for OpenAI-compatible chat completion endpoints.

use super::{PromptRequest, Provider, ProviderError, Speaker};
use serde_json::json;
use std::time::Duration;

/// Connection settings for an OpenAI-compatible `/chat/completions` API.
#[derive(Debug, Clone)]
pub struct HttpProviderConfig {
    /// API base, e.g. `https://api.openai.com/v1`. No trailing slash.
    pub base_url: String,
    /// Model name sent with every request.
    pub model: String,
    /// Name of the environment variable holding the API key. The key is
    /// read per request and never stored or written to disk.
    pub api_key_env: String,
    /// Per-request timeout covering connect, write, and read.
    pub timeout: Duration,
}

impl Default for HttpProviderConfig {
    fn default() -> Self {
        HttpProviderConfig {
            base_url: "https://api.openai.com/v1".to_string(),
            model: "gpt-4o".to_string(),
            api_key_env: "SHELLFORGE_API_KEY".to_string(),
            timeout: Duration::from_secs(120),
        }
    }
}

/// Blocking chat-completions client.
///
/// Tool messages are sent with role `user`: observation feedback is input
/// to the model, and the bare `tool` role requires tool-call plumbing this
/// pipeline does not use.
pub struct HttpProvider {
    config: HttpProviderConfig,
    agent: ureq::Agent,
}

impl HttpProvider {
    pub fn new(config: HttpProviderConfig) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(config.timeout).build();
        HttpProvider { config, agent }
    }

    fn wire_role(speaker: Speaker) -> &'static str {
        match speaker {
            Speaker::System => "system",
            Speaker::User | Speaker::Tool => "user",
            Speaker::Assistant => "assistant",
        }
    }
}

impl Provider for HttpProvider {
    fn provider_id(&self) -> String {
        format!("openai-compatible:{}", self.config.model)
    }

    fn complete(&self, request: &PromptRequest) -> Result<String, ProviderError> {
        let api_key = std::env::var(&self.config.api_key_env).map_err(|_| {
            ProviderError::Fatal(format!(
                "API key environment variable {} is not set",
                self.config.api_key_env
            ))
        })?;
        let messages: Vec<serde_json::Value> = request
            .messages
            .iter()
            .map(|m| json!({"role": Self::wire_role(m.speaker), "content": m.text}))
            .collect();
        let body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        });
        let url = format!("{}/chat/completions", self.config.base_url);
        let response = self
            .agent
            .post(&url)
            .set("Authorization", &format!("Bearer {api_key}"))
            .send_json(body);
        let response = match response {
            Ok(resp) => resp,
            Err(ureq::Error::Status(code, resp)) => {
                let detail = resp.into_string().unwrap_or_default();
                let excerpt: String = detail.chars().take(400).collect();
                let message = format!("HTTP {code}: {excerpt}");
                return if code == 429 || code >= 500 {
                    Err(ProviderError::Transient(message))
                } else {
                    Err(ProviderError::Fatal(message))
                };
            }
            Err(err) => return Err(ProviderError::Transient(format!("transport: {err}"))),
        };
        let payload: serde_json::Value = response
            .into_json()
            .map_err(|err| ProviderError::Transient(format!("response body: {err}")))?;
        let text = payload
            .pointer("/choices/0/message/content")
            .and_then(serde_json::Value::as_str)
            .ok_or_else(|| {
                ProviderError::Fatal(format!(
                    "response lacks choices[0].message.content: {}",
                    super::canonical_json(&payload).chars().take(400).collect::<String>()
                ))
            })?;
        if text.is_empty() {
            return Err(ProviderError::Fatal("provider returned empty message content".into()));
        }
        Ok(text.to_string())
    }
}
