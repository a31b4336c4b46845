//! Agent backends: an HTTP client for a chat-style endpoint and a scripted mock.

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Request body sent to a backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRequest {
    pub role_prompt: String,
    pub user_text: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub image_b64: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
struct AgentResponse {
    text: String,
}

pub trait Backend: Send + Sync {
    fn call(&self, request: &AgentRequest) -> Result<String>;
}

/// Calls `backend`, retrying timeouts and retryable failures up to
/// `retry_budget` extra times. Returns the text and the number of retries.
pub fn call_with_retry(backend: &dyn Backend, request: &AgentRequest, retry_budget: usize) -> Result<(String, usize)> {
    let mut attempt = 0;
    loop {
        match backend.call(request) {
            Ok(text) => return Ok((text, attempt)),
            Err(e) if e.is_retryable() && attempt < retry_budget => {
                attempt += 1;
                log::warn!("backend call failed ({e}); retry {attempt}/{retry_budget}");
            }
            Err(e) if e.is_retryable() => {
                return Err(Error::RetriesExhausted { attempts: attempt + 1, last: Box::new(e) });
            }
            Err(e) => return Err(e),
        }
    }
}

/// Posts requests as JSON to a fixed URL.
pub struct HttpBackend {
    url: String,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        Self { url: url.into(), agent }
    }
}

/// 408 and 504 are timeouts; 429 and other 5xx are worth retrying.
pub fn classify_status(code: u16, body: &str) -> Error {
    match code {
        408 | 504 => Error::Timeout,
        429 | 500..=599 => Error::Retryable(format!("HTTP {code}: {body}")),
        _ => Error::Backend(format!("HTTP {code}: {body}")),
    }
}

impl Backend for HttpBackend {
    fn call(&self, request: &AgentRequest) -> Result<String> {
        let body = serde_json::to_value(request)?;
        match self.agent.post(&self.url).send_json(body) {
            Ok(resp) => {
                let parsed: AgentResponse =
                    resp.into_json().map_err(|e| Error::Contract(format!("response is not {{\"text\": ...}}: {e}")))?;
                Ok(parsed.text)
            }
            Err(ureq::Error::Status(code, resp)) => Err(classify_status(code, &resp.into_string().unwrap_or_default())),
            Err(ureq::Error::Transport(t)) => match t.kind() {
                ureq::ErrorKind::Io => Err(Error::Timeout),
                ureq::ErrorKind::ConnectionFailed | ureq::ErrorKind::Dns => Err(Error::Retryable(t.to_string())),
                _ => Err(Error::Backend(t.to_string())),
            },
        }
    }
}

/// Which agent a prompt addresses; the first line of every role prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Captioning,
    Summary,
    Verification,
}

impl Role {
    pub fn tag(self) -> &'static str {
        match self {
            Role::Captioning => "ROLE: captioning",
            Role::Summary => "ROLE: summary",
            Role::Verification => "ROLE: verification",
        }
    }

    pub fn of(request: &AgentRequest) -> Option<Role> {
        let first = request.role_prompt.lines().next()?.trim();
        [Role::Captioning, Role::Summary, Role::Verification].into_iter().find(|r| r.tag() == first)
    }
}

/// The subject of a request: `SAMPLE: id` or `DISEASE: name` in the user text.
pub fn request_key(request: &AgentRequest) -> Option<String> {
    request.user_text.lines().find_map(|l| {
        let l = l.trim();
        l.strip_prefix("SAMPLE:").or_else(|| l.strip_prefix("DISEASE:")).map(|v| v.trim().to_owned())
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum MockReply {
    Text(String),
    Timeout,
    Fail(String),
}

type Responder = dyn Fn(Role, &AgentRequest) -> String + Send + Sync;

/// Deterministic backend. Scripted replies are consumed per (role, subject) in
/// order; the last one repeats. Unscripted requests go to the fallback.
pub struct MockBackend {
    scripts: HashMap<(Role, String), Vec<MockReply>>,
    calls: Mutex<HashMap<(Role, String), usize>>,
    fallback: Box<Responder>,
}

impl Default for MockBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl MockBackend {
    pub fn new() -> Self {
        Self { scripts: HashMap::new(), calls: Mutex::new(HashMap::new()), fallback: Box::new(default_reply) }
    }

    pub fn with_fallback(f: impl Fn(Role, &AgentRequest) -> String + Send + Sync + 'static) -> Self {
        Self { fallback: Box::new(f), ..Self::new() }
    }

    pub fn script(mut self, role: Role, key: impl Into<String>, replies: Vec<MockReply>) -> Self {
        self.scripts.insert((role, key.into()), replies);
        self
    }

    pub fn calls(&self, role: Role, key: &str) -> usize {
        self.calls.lock().unwrap().get(&(role, key.to_owned())).copied().unwrap_or(0)
    }
}

impl Backend for MockBackend {
    fn call(&self, request: &AgentRequest) -> Result<String> {
        let role = Role::of(request).ok_or_else(|| Error::Contract("mock cannot tell the role of this prompt".into()))?;
        let key = request_key(request).unwrap_or_default();
        let n = {
            let mut calls = self.calls.lock().unwrap();
            let n = calls.entry((role, key.clone())).or_insert(0);
            *n += 1;
            *n - 1
        };
        match self.scripts.get(&(role, key)) {
            Some(replies) if !replies.is_empty() => match &replies[n.min(replies.len() - 1)] {
                MockReply::Text(t) => Ok(t.clone()),
                MockReply::Timeout => Err(Error::Timeout),
                MockReply::Fail(m) => Err(Error::Backend(m.clone())),
            },
            _ => Ok((self.fallback)(role, request)),
        }
    }
}

fn field<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines().find_map(|l| l.trim().strip_prefix(key)).map(str::trim)
}

/// Captions name the top candidate, summaries restate the profile, and
/// verification confirms the top candidate.
pub fn default_reply(role: Role, request: &AgentRequest) -> String {
    let top = field(&request.user_text, "CANDIDATES:").and_then(|c| c.split(';').next()).map(str::trim).unwrap_or("");
    match role {
        Role::Captioning => format!("Findings consistent with {top}."),
        Role::Summary => {
            let name = field(&request.user_text, "DISEASE:").unwrap_or("");
            let profile = field(&request.user_text, "PROFILE:").unwrap_or("");
            let first = profile.split('.').next().unwrap_or("").trim();
            format!("```\nNAME: {name}\nPOS: {first}\nSITES: unspecified\nMINSET: {first}\n```")
        }
        Role::Verification => {
            let initial = field(&request.user_text, "INITIAL CAPTION:").unwrap_or("");
            format!("```\nVERDICT: verified\nDIAGNOSIS: {top}\nCAPTION: {initial}\n```")
        }
    }
}
