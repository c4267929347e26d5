use std::path::PathBuf;
use std::thread::sleep;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Environment variable holding the bearer token for [`HttpClient`].
pub const API_KEY_ENV: &str = "CALLCAST_API_KEY";

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("endpoint returned status {0}: {1}")]
    Status(u16, String),
    #[error("no canned reply for this prompt, expected {0}")]
    MockMissing(PathBuf),
    #[error("malformed reply: {0}")]
    BadReply(String),
}

pub trait LlmClient {
    fn complete(&self, prompt: &str) -> Result<String, ClientError>;
}

pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// Canned file stored by the mock client as `<sha256(prompt)>.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockReply {
    pub reply: String,
}

/// Replays replies from a directory of files keyed by prompt hash.
#[derive(Debug, Clone)]
pub struct MockClient {
    pub dir: PathBuf,
}

impl MockClient {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path_for(&self, prompt: &str) -> PathBuf {
        self.dir.join(format!("{}.json", prompt_hash(prompt)))
    }

    /// Stores `reply` as the canned answer to `prompt`.
    pub fn record(&self, prompt: &str, reply: &str) -> std::io::Result<PathBuf> {
        std::fs::create_dir_all(&self.dir)?;
        let p = self.path_for(prompt);
        let body = serde_json::to_string_pretty(&MockReply { reply: reply.into() }).expect("serializes");
        std::fs::write(&p, body + "\n")?;
        Ok(p)
    }
}

impl LlmClient for MockClient {
    fn complete(&self, prompt: &str) -> Result<String, ClientError> {
        let p = self.path_for(prompt);
        let text = std::fs::read_to_string(&p).map_err(|_| ClientError::MockMissing(p.clone()))?;
        let r: MockReply = serde_json::from_str(&text).map_err(|e| ClientError::BadReply(format!("{}: {e}", p.display())))?;
        Ok(r.reply)
    }
}

/// POSTs `{model, prompt, max_tokens}` as JSON with a bearer token.
#[derive(Debug, Clone)]
pub struct HttpClient {
    pub endpoint: String,
    pub model: String,
    pub max_tokens: u32,
    pub api_key: Option<String>,
    pub attempts: u32,
    pub backoff: Duration,
    pub timeout: Duration,
}

impl HttpClient {
    /// Reads the key from [`API_KEY_ENV`].
    pub fn from_env(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            max_tokens: 2048,
            api_key: std::env::var(API_KEY_ENV).ok(),
            attempts: 3,
            backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(120),
        }
    }

    fn once(&self, prompt: &str) -> Result<String, (bool, ClientError)> {
        let agent = ureq::AgentBuilder::new().timeout(self.timeout).build();
        let mut req = agent.post(&self.endpoint);
        if let Some(k) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {k}"));
        }
        let body = serde_json::json!({"model": self.model, "prompt": prompt, "max_tokens": self.max_tokens});
        match req.send_json(body) {
            Ok(resp) => {
                let v: Value = resp
                    .into_json()
                    .map_err(|e| (false, ClientError::BadReply(e.to_string())))?;
                reply_text(&v).ok_or_else(|| (false, ClientError::BadReply(v.to_string())))
            }
            Err(ureq::Error::Status(code, resp)) => {
                let retry = code == 429 || code >= 500;
                Err((retry, ClientError::Status(code, resp.into_string().unwrap_or_default())))
            }
            Err(e) => Err((true, ClientError::Transport(e.to_string()))),
        }
    }
}

impl LlmClient for HttpClient {
    /// Retries transient failures with exponential backoff.
    fn complete(&self, prompt: &str) -> Result<String, ClientError> {
        let mut wait = self.backoff;
        let mut attempt = 1;
        loop {
            match self.once(prompt) {
                Ok(s) => return Ok(s),
                Err((true, _)) if attempt < self.attempts => {
                    sleep(wait);
                    wait *= 2;
                    attempt += 1;
                }
                Err((_, e)) => return Err(e),
            }
        }
    }
}

/// The reply text from the common completion response shapes.
pub fn reply_text(v: &Value) -> Option<String> {
    let paths: [&[&str]; 6] = [
        &["completion"],
        &["text"],
        &["output"],
        &["choices", "0", "text"],
        &["choices", "0", "message", "content"],
        &["content", "0", "text"],
    ];
    paths.iter().find_map(|p| {
        let mut cur = v;
        for key in *p {
            cur = match key.parse::<usize>() {
                Ok(i) => cur.get(i)?,
                Err(_) => cur.get(*key)?,
            };
        }
        cur.as_str().map(str::to_string)
    })
}
