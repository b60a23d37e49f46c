//! Black-box chat-completions client for remote victims and judges.

use std::io;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::table::Table;

/// Environment variable holding the bearer token.
pub const API_KEY_ENV: &str = "TABPERM_API_KEY";
/// Environment variable overriding the endpoint base URL.
pub const BASE_URL_ENV: &str = "TABPERM_BASE_URL";
pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";

#[derive(Debug, Error)]
pub enum RemoteError {
    #[error("authentication rejected (HTTP {0})")]
    Auth(u16),
    #[error("request timed out after {0} attempts")]
    Timeout(u32),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
}

impl RemoteError {
    fn is_transient(&self) -> bool {
        match self {
            RemoteError::Timeout(_) | RemoteError::Transport(_) => true,
            RemoteError::Http { status, .. } => *status == 429 || *status >= 500,
            RemoteError::Auth(_) | RemoteError::Malformed(_) => false,
        }
    }
}

/// Endpoint descriptor. The token is read from the environment and never
/// serialized.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteClient {
    pub base_url: String,
    pub model: String,
    #[serde(skip)]
    pub api_key: Option<String>,
    pub timeout_ms: u64,
    /// Retries after the first attempt for transient failures.
    pub max_retries: u32,
    /// First backoff delay; doubles on every retry.
    pub backoff_ms: u64,
    pub seed: Option<u64>,
}

impl Default for RemoteClient {
    fn default() -> Self {
        Self {
            base_url: DEFAULT_BASE_URL.to_owned(),
            model: String::new(),
            api_key: None,
            timeout_ms: 60_000,
            max_retries: 3,
            backoff_ms: 500,
            seed: Some(0),
        }
    }
}

/// One assistant reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatReply {
    pub text: String,
    /// Whether the response carried evidence that the seed was honored.
    pub seed_acknowledged: bool,
}

impl RemoteClient {
    /// Client for `model`, with base URL and token taken from the environment.
    pub fn from_env(model: impl Into<String>) -> Self {
        Self {
            base_url: std::env::var(BASE_URL_ENV).unwrap_or_else(|_| DEFAULT_BASE_URL.to_owned()),
            model: model.into(),
            api_key: std::env::var(API_KEY_ENV).ok(),
            ..Default::default()
        }
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }

    fn attempt(&self, agent: &ureq::Agent, body: &Value) -> Result<ChatReply, RemoteError> {
        let mut req = agent
            .post(&self.endpoint())
            .set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let resp = match req.send_json(body.clone()) {
            Ok(r) => r,
            Err(ureq::Error::Status(code @ (401 | 403), _)) => return Err(RemoteError::Auth(code)),
            Err(ureq::Error::Status(status, r)) => {
                let body = r.into_string().unwrap_or_default();
                return Err(RemoteError::Http { status, body });
            }
            Err(ureq::Error::Transport(t)) => return Err(classify_transport(t)),
        };
        let text = resp.into_string().map_err(|e| {
            if is_timeout(&e) {
                RemoteError::Timeout(1)
            } else {
                RemoteError::Transport(e.to_string())
            }
        })?;
        parse_reply(&text)
    }

    /// Send one user message at temperature 0, retrying transient failures
    /// with exponential backoff.
    pub fn chat(&self, prompt: &str) -> Result<ChatReply, RemoteError> {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_millis(self.timeout_ms))
            .build();
        let mut body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        });
        if let Some(seed) = self.seed {
            body["seed"] = json!(seed);
        }
        let mut delay = Duration::from_millis(self.backoff_ms);
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&agent, &body) {
                Ok(r) => return Ok(r),
                Err(e) if e.is_transient() && attempts <= self.max_retries => {
                    thread::sleep(delay);
                    delay *= 2;
                }
                Err(RemoteError::Timeout(_)) => return Err(RemoteError::Timeout(attempts)),
                Err(e) => return Err(e),
            }
        }
    }
}

fn is_timeout(e: &io::Error) -> bool {
    matches!(
        e.kind(),
        io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock
    )
}

fn classify_transport(t: ureq::Transport) -> RemoteError {
    let timed_out = std::error::Error::source(&t)
        .and_then(|s| s.downcast_ref::<io::Error>())
        .is_some_and(is_timeout);
    if timed_out {
        RemoteError::Timeout(1)
    } else {
        RemoteError::Transport(t.to_string())
    }
}

fn parse_reply(text: &str) -> Result<ChatReply, RemoteError> {
    let v: Value = serde_json::from_str(text).map_err(|e| RemoteError::Malformed(e.to_string()))?;
    let content = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| RemoteError::Malformed("missing choices[0].message.content".into()))?;
    let seed_acknowledged = v.get("seed").is_some_and(|s| !s.is_null())
        || v.get("system_fingerprint").is_some_and(|s| !s.is_null());
    Ok(ChatReply {
        text: content.to_owned(),
        seed_acknowledged,
    })
}

/// The single user message sent to a remote victim: linearized table, then
/// the question.
pub fn table_prompt(table: &Table, question: &str) -> String {
    format!("[Table]\n{}\n\n[Question]\n{}", table.linearize(), question)
}

/// Ask a remote chat model to answer `prompt`.
pub fn remote_generate(client: &RemoteClient, prompt: &str) -> Result<String, RemoteError> {
    client.chat(prompt).map(|r| r.text)
}
