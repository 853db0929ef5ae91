//! Model-output parsing and the shared re-prompt loop.
//!
//! Agents in this pipeline reply either with structured JSON or with a
//! single fenced code block. Both conventions are parsed here, and
//! [`LlmCall`] wraps the common retry pattern: when a reply fails
//! validation, the reply and a correction notice are appended to the
//! conversation and the model is asked again, up to a bounded number of
//! re-prompts.

use crate::gateway::{AgentRole, Gateway, GatewayError, Message, PromptRequest};
use serde::de::DeserializeOwned;
use thiserror::Error;

/// One fenced code block from a model reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FencedBlock {
    /// Info string after the opening fence, e.g. `bash` or `json`. Empty
    /// when the fence is bare.
    pub lang: String,
    pub content: String,
}

/// Extracts all complete fenced code blocks in order of appearance.
///
/// A fence opens on a line starting with three backticks (after optional
/// indentation) and closes on a line containing only backticks. An
/// unterminated fence yields no block.
pub fn extract_fenced_blocks(text: &str) -> Vec<FencedBlock> {
    let mut blocks = Vec::new();
    let mut current: Option<(String, Vec<&str>)> = None;
    for line in text.lines() {
        let trimmed = line.trim();
        match current.as_mut() {
            None => {
                if let Some(rest) = trimmed.strip_prefix("```") {
                    current = Some((rest.trim().to_string(), Vec::new()));
                }
            }
            Some((_, lines)) => {
                if !trimmed.is_empty() && trimmed.chars().all(|c| c == '`') {
                    let (lang, lines) = current.take().expect("open block");
                    blocks.push(FencedBlock { lang, content: lines.join("\n") });
                } else {
                    lines.push(line);
                }
            }
        }
    }
    blocks
}

/// Extracts the reply's single fenced block, rejecting replies with zero or
/// multiple blocks.
pub fn single_fenced_block(text: &str) -> Result<FencedBlock, String> {
    let mut blocks = extract_fenced_blocks(text);
    match blocks.len() {
        1 => Ok(blocks.remove(0)),
        0 => Err("reply contains no fenced code block".to_string()),
        n => Err(format!("reply contains {n} fenced code blocks, expected exactly one")),
    }
}

/// Parses a JSON reply: either a fenced block tagged `json` (or untagged
/// but parseable), or the whole reply as bare JSON.
pub fn parse_json_reply<T: DeserializeOwned>(text: &str) -> Result<T, String> {
    let blocks = extract_fenced_blocks(text);
    let mut first_err: Option<String> = None;
    for block in &blocks {
        if block.lang == "json" || block.lang.is_empty() {
            match serde_json::from_str(&block.content) {
                Ok(value) => return Ok(value),
                Err(err) => {
                    first_err.get_or_insert_with(|| format!("fenced JSON is invalid: {err}"));
                }
            }
        }
    }
    match serde_json::from_str(text.trim()) {
        Ok(value) => Ok(value),
        Err(err) => Err(first_err.unwrap_or_else(|| format!("reply is not the required JSON: {err}"))),
    }
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("{role} reply unusable after {attempts} attempt(s): {detail}")]
    Unusable { role: AgentRole, attempts: u32, detail: String },
}

/// Parameters for one logical agent call through the gateway.
#[derive(Clone, Copy)]
pub struct LlmCall<'a> {
    pub gateway: &'a Gateway,
    /// Cassette scope, normally the task id.
    pub scope: &'a str,
    pub role: AgentRole,
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// Additional attempts after the first when a reply fails validation.
    pub reprompt_budget: u32,
}

impl<'a> LlmCall<'a> {
    /// Completes the conversation once, with no output validation.
    pub fn raw(&self, messages: Vec<Message>) -> Result<String, PromptError> {
        let request = self.request(messages);
        Ok(self.gateway.complete(self.scope, &request)?)
    }

    /// Completes the conversation, validating each reply with `parse`.
    /// A failed validation appends the reply plus a correction notice and
    /// retries until the re-prompt budget is spent.
    pub fn structured<T>(
        &self,
        mut messages: Vec<Message>,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<T, PromptError> {
        let attempts = self.reprompt_budget + 1;
        let mut last_detail = String::new();
        for _ in 0..attempts {
            let request = self.request(messages.clone());
            let reply = self.gateway.complete(self.scope, &request)?;
            match parse(&reply) {
                Ok(value) => return Ok(value),
                Err(detail) => {
                    tracing::debug!(role = %self.role, detail = %detail, "re-prompting after unusable reply");
                    messages.push(Message::assistant(reply));
                    messages.push(Message::user(format!(
                        "Your previous reply could not be used: {detail}. \
                         Reply again following the required format exactly."
                    )));
                    last_detail = detail;
                }
            }
        }
        Err(PromptError::Unusable { role: self.role, attempts, detail: last_detail })
    }

    fn request(&self, messages: Vec<Message>) -> PromptRequest {
        PromptRequest {
            agent_role: self.role,
            messages,
            temperature: self.temperature,
            max_output_tokens: self.max_output_tokens,
        }
    }
}
