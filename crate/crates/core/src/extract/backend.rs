//! LLM backends and the privacy guard in front of them.

use std::path::PathBuf;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::Origin;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Local,
    Cloud,
    Mock,
}

impl std::fmt::Display for BackendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BackendKind::Local => "local",
            BackendKind::Cloud => "cloud",
            BackendKind::Mock => "mock",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrivacyTier {
    PhiAllowed,
    PublicOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmBackendSpec {
    pub kind: BackendKind,
    /// URL for HTTP backends, reply directory for the mock.
    pub endpoint: String,
    pub model_name: String,
    pub max_context_chars: usize,
    pub privacy_tier: PrivacyTier,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_timeout")]
    pub timeout_seconds: u64,
    /// Minimum spacing between calls.
    #[serde(default)]
    pub min_interval_ms: u64,
}

fn default_retries() -> u32 {
    2
}

fn default_timeout() -> u64 {
    300
}

impl LlmBackendSpec {
    pub fn mock(dir: impl Into<PathBuf>, privacy_tier: PrivacyTier) -> Self {
        LlmBackendSpec {
            kind: BackendKind::Mock,
            endpoint: dir.into().to_string_lossy().into_owned(),
            model_name: "mock".into(),
            max_context_chars: 1_000_000,
            privacy_tier,
            retries: 0,
            timeout_seconds: 1,
            min_interval_ms: 0,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_context_chars == 0 {
            return Err(BackendError::Config("max_context_chars must be positive".into()));
        }
        if self.kind == BackendKind::Cloud && self.privacy_tier == PrivacyTier::PhiAllowed {
            return Err(BackendError::Config(
                "a cloud backend cannot be marked phi_allowed".into(),
            ));
        }
        if self.kind != BackendKind::Mock && self.endpoint.trim().is_empty() {
            return Err(BackendError::Config("endpoint is required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("refusing to send {origin:?} document {doc_id} to {kind:?} backend with privacy tier public_only")]
pub struct PrivacyViolation {
    pub doc_id: String,
    pub origin: Origin,
    pub kind: BackendKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend returned status {0}")]
    Status(u16),
    #[error("backend timed out")]
    Timeout,
    #[error("no canned reply for {0}")]
    NoReply(String),
    #[error(transparent)]
    Privacy(#[from] PrivacyViolation),
    #[error("backend configuration error: {0}")]
    Config(String),
}

impl BackendError {
    /// Fatal errors abort a job; the rest quarantine the document.
    pub fn is_fatal(&self) -> bool {
        matches!(self, BackendError::Privacy(_) | BackendError::Config(_))
    }

    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_) | BackendError::Timeout)
            || matches!(self, BackendError::Status(s) if *s == 429 || *s >= 500)
    }
}

/// The guard every invocation passes through.
pub fn check_privacy(origin: Origin, doc_id: &str, spec: &LlmBackendSpec) -> Result<(), PrivacyViolation> {
    if origin == Origin::Ehr && spec.privacy_tier == PrivacyTier::PublicOnly {
        return Err(PrivacyViolation {
            doc_id: doc_id.to_string(),
            origin,
            kind: spec.kind,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionRequest<'a> {
    pub doc_id: &'a str,
    pub prompt: &'a str,
    pub seed: u64,
}

/// Sends a prompt somewhere and returns the raw model text.
pub trait Transport: Send + Sync {
    fn send(&self, spec: &LlmBackendSpec, req: &CompletionRequest<'_>) -> Result<String, BackendError>;
}

/// Replies from `{endpoint}/{doc_id}.json`. The file content is returned
/// verbatim; a JSON array holds alternatives picked by `seed`.
#[derive(Debug, Default)]
pub struct MockTransport;

impl Transport for MockTransport {
    fn send(&self, spec: &LlmBackendSpec, req: &CompletionRequest<'_>) -> Result<String, BackendError> {
        let path = PathBuf::from(&spec.endpoint).join(format!("{}.json", req.doc_id));
        let text = std::fs::read_to_string(&path).map_err(|_| BackendError::NoReply(req.doc_id.to_string()))?;
        if let Ok(serde_json::Value::Array(alts)) = serde_json::from_str::<serde_json::Value>(&text) {
            if alts.is_empty() {
                return Err(BackendError::NoReply(req.doc_id.to_string()));
            }
            let pick = &alts[(req.seed % alts.len() as u64) as usize];
            return Ok(match pick {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            });
        }
        Ok(text)
    }
}

#[derive(Debug, Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    input: &'a str,
    response_format: &'a str,
}

#[derive(Debug, Deserialize)]
struct WireResponse {
    output: String,
}

/// JSON over HTTP: `{model, input, response_format}` in, `{output}` back.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(HttpTransport { client })
    }
}

impl Transport for HttpTransport {
    fn send(&self, spec: &LlmBackendSpec, req: &CompletionRequest<'_>) -> Result<String, BackendError> {
        let body = WireRequest {
            model: &spec.model_name,
            input: req.prompt,
            response_format: "json_object",
        };
        let resp = self.client.post(&spec.endpoint).json(&body).send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(BackendError::Status(status.as_u16()));
        }
        let wire: WireResponse = resp.json().map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(wire.output)
    }
}

/// A configured backend. All traffic goes through [`Backend::invoke`],
/// which applies the privacy guard, the rate limit and retries.
pub struct Backend {
    spec: LlmBackendSpec,
    transport: Box<dyn Transport>,
    last_call: Mutex<Option<Instant>>,
    backoff: Duration,
}

impl std::fmt::Debug for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backend")
            .field("spec", &self.spec)
            .finish_non_exhaustive()
    }
}

impl Backend {
    pub fn new(spec: LlmBackendSpec, transport: Box<dyn Transport>) -> Result<Self, BackendError> {
        spec.validate()?;
        Ok(Backend {
            spec,
            transport,
            last_call: Mutex::new(None),
            backoff: Duration::from_millis(200),
        })
    }

    /// Picks the transport matching `spec.kind`.
    pub fn from_spec(spec: LlmBackendSpec) -> Result<Self, BackendError> {
        let transport: Box<dyn Transport> = match spec.kind {
            BackendKind::Mock => Box::new(MockTransport),
            BackendKind::Local | BackendKind::Cloud => {
                Box::new(HttpTransport::new(Duration::from_secs(spec.timeout_seconds))?)
            }
        };
        Backend::new(spec, transport)
    }

    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn spec(&self) -> &LlmBackendSpec {
        &self.spec
    }

    fn pace(&self) {
        if self.spec.min_interval_ms == 0 {
            return;
        }
        let gap = Duration::from_millis(self.spec.min_interval_ms);
        let mut last = self.last_call.lock().expect("rate limiter poisoned");
        if let Some(prev) = *last {
            let since = prev.elapsed();
            if since < gap {
                std::thread::sleep(gap - since);
            }
        }
        *last = Some(Instant::now());
    }

    pub fn invoke(&self, origin: Origin, req: &CompletionRequest<'_>) -> Result<String, BackendError> {
        check_privacy(origin, req.doc_id, &self.spec)?;
        let mut attempt = 0;
        loop {
            self.pace();
            match self.transport.send(&self.spec, req) {
                Ok(out) => return Ok(out),
                Err(e) if e.is_retryable() && attempt < self.spec.retries => {
                    attempt += 1;
                    log::warn!("{}: attempt {attempt} failed ({e}), retrying", req.doc_id);
                    std::thread::sleep(self.backoff * attempt);
                }
                Err(e) => return Err(e),
            }
        }
    }
}
