//! One interface over every way of getting text out of a model: a live
//! chat-completions server, scripted closures for tests, and record/replay
//! transcripts.
//!
//! Images are resolved (read, size-checked, hashed, base64 encoded) by the
//! gateway before any backend sees the request, so an unreadable image fails
//! the same way for every backend.

mod http;
mod mock;
mod replay;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use http::{HttpBackend, HttpResponse, HttpTransport, TransportError, UreqTransport};
pub use mock::{FixedLetterMock, ScriptedBackend};
pub use replay::{
    read_transcript, with_transcript, RecordingBackend, ReplayBackend, TranscriptEntry, TranscriptMode,
};

pub const DEFAULT_MAX_IMAGE_BYTES: usize = 4 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Decoding {
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_max_tokens() -> u32 {
    1024
}

impl Default for Decoding {
    fn default() -> Self {
        Decoding {
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            seed: None,
        }
    }
}

/// A model to talk to. `base_url` is either an HTTP base URL or a mock
/// designator (`mock:...`) understood by [`backend_for`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEndpoint {
    pub model_id: String,
    pub base_url: String,
    #[serde(default)]
    pub decoding: Decoding,
    /// Name of the environment variable holding a bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_ref: Option<String>,
}

impl ModelEndpoint {
    pub fn new(model_id: impl Into<String>, base_url: impl Into<String>) -> Self {
        ModelEndpoint {
            model_id: model_id.into(),
            base_url: base_url.into(),
            decoding: Decoding::default(),
            auth_ref: None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.model_id.trim().is_empty() {
            return Err("model_id must not be empty".into());
        }
        if self.decoding.temperature.is_nan() || self.decoding.temperature < 0.0 {
            return Err(format!("temperature must be >= 0, got {}", self.decoding.temperature));
        }
        if self.decoding.max_tokens == 0 {
            return Err("max_tokens must be positive".into());
        }
        Ok(())
    }

    /// Same server and decoding, different model (a fine-tuned successor).
    pub fn with_model(&self, model_id: impl Into<String>) -> Self {
        ModelEndpoint {
            model_id: model_id.into(),
            ..self.clone()
        }
    }

    pub fn is_mock(&self) -> bool {
        self.base_url.starts_with("mock:")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub request_index: usize,
    pub prompt: String,
    pub image_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoding: Option<Decoding>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum FailureReason {
    Transport(String),
    MalformedResponse(String),
    Image(String),
    InvalidRequest(String),
    ReplayMiss(String),
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailureReason::Transport(m) => write!(f, "transport: {m}"),
            FailureReason::MalformedResponse(m) => write!(f, "malformed response: {m}"),
            FailureReason::Image(m) => write!(f, "image: {m}"),
            FailureReason::InvalidRequest(m) => write!(f, "invalid request: {m}"),
            FailureReason::ReplayMiss(m) => write!(f, "replay miss: {m}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "snake_case")]
pub enum GenerationStatus {
    Ok,
    Failed(FailureReason),
}

/// Outcome of one request. `latency` is wall-clock and deliberately not
/// serialized, so persisted result lists stay byte-identical across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub request_index: usize,
    pub raw_text: String,
    pub attempt_count: u32,
    #[serde(skip)]
    pub latency: Duration,
    #[serde(flatten)]
    pub status: GenerationStatus,
}

impl GenerationResult {
    pub fn is_ok(&self) -> bool {
        self.status == GenerationStatus::Ok
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    /// Worth retrying: timeouts, rate limits, server errors.
    #[error("transient: {0}")]
    Transient(String),
    #[error("fatal: {0}")]
    Fatal(String),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("replay miss for prompt {prompt_sha256} image {image_sha256} (model {model_id})")]
    ReplayMiss {
        model_id: String,
        prompt_sha256: String,
        image_sha256: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedImage {
    pub data_uri: String,
    pub sha256: String,
}

/// Everything a backend needs for one call.
#[derive(Debug, Clone, Copy)]
pub struct BackendCall<'a> {
    pub endpoint: &'a ModelEndpoint,
    pub request_index: usize,
    pub prompt: &'a str,
    pub image: &'a ResolvedImage,
    pub decoding: &'a Decoding,
}

pub trait Backend: Send + Sync {
    fn complete(&self, call: &BackendCall<'_>) -> Result<String, BackendError>;
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn mime_for(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("bmp") => "image/bmp",
        _ => "application/octet-stream",
    }
}

/// Turns image references into data URIs.
#[derive(Debug, Clone)]
pub struct ImageResolver {
    pub root: PathBuf,
    /// Limit on the base64 payload length.
    pub max_encoded_bytes: usize,
}

impl ImageResolver {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ImageResolver {
            root: root.into(),
            max_encoded_bytes: DEFAULT_MAX_IMAGE_BYTES,
        }
    }

    pub fn resolve(&self, image_ref: &str) -> Result<ResolvedImage, String> {
        let path = self.root.join(image_ref);
        let bytes = fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        let encoded_len = bytes.len().div_ceil(3) * 4;
        if encoded_len > self.max_encoded_bytes {
            return Err(format!(
                "{} is {encoded_len} bytes after encoding, limit is {}",
                path.display(),
                self.max_encoded_bytes
            ));
        }
        let b64 = base64::engine::general_purpose::STANDARD.encode(&bytes);
        Ok(ResolvedImage {
            data_uri: format!("data:{};base64,{b64}", mime_for(&path)),
            sha256: sha256_hex(&bytes),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_initial_backoff_ms")]
    pub initial_backoff_ms: u64,
    #[serde(default = "default_max_backoff_ms")]
    pub max_backoff_ms: u64,
}

fn default_max_retries() -> u32 {
    3
}
fn default_initial_backoff_ms() -> u64 {
    500
}
fn default_max_backoff_ms() -> u64 {
    30_000
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: default_max_retries(),
            initial_backoff_ms: default_initial_backoff_ms(),
            max_backoff_ms: default_max_backoff_ms(),
        }
    }
}

impl RetryPolicy {
    pub fn no_wait(max_retries: u32) -> Self {
        RetryPolicy {
            max_retries,
            initial_backoff_ms: 0,
            max_backoff_ms: 0,
        }
    }

    /// Delay before retry number `retry` (1-based): doubles from the initial
    /// backoff, capped.
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = 1u64.checked_shl(retry.saturating_sub(1)).unwrap_or(u64::MAX);
        Duration::from_millis(self.initial_backoff_ms.saturating_mul(factor).min(self.max_backoff_ms))
    }
}

pub struct Gateway {
    backend: Arc<dyn Backend>,
    images: ImageResolver,
    retry: RetryPolicy,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, images: ImageResolver, retry: RetryPolicy) -> Self {
        Gateway {
            backend,
            images,
            retry,
        }
    }

    pub fn retry_policy(&self) -> &RetryPolicy {
        &self.retry
    }

    pub fn generate(&self, endpoint: &ModelEndpoint, request: &GenerationRequest) -> GenerationResult {
        let start = Instant::now();
        let failed = |reason, attempts| GenerationResult {
            request_index: request.request_index,
            raw_text: String::new(),
            attempt_count: attempts,
            latency: start.elapsed(),
            status: GenerationStatus::Failed(reason),
        };
        if request.prompt.trim().is_empty() {
            return failed(FailureReason::InvalidRequest("empty prompt".into()), 1);
        }
        let image = match self.images.resolve(&request.image_ref) {
            Ok(i) => i,
            Err(e) => return failed(FailureReason::Image(e), 1),
        };
        let decoding = request.decoding.as_ref().unwrap_or(&endpoint.decoding);
        let call = BackendCall {
            endpoint,
            request_index: request.request_index,
            prompt: &request.prompt,
            image: &image,
            decoding,
        };

        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.backend.complete(&call) {
                Ok(raw_text) => {
                    return GenerationResult {
                        request_index: request.request_index,
                        raw_text,
                        attempt_count: attempt,
                        latency: start.elapsed(),
                        status: GenerationStatus::Ok,
                    }
                }
                Err(BackendError::Transient(m)) => {
                    if attempt > self.retry.max_retries {
                        return failed(FailureReason::Transport(m), attempt);
                    }
                    log::debug!("request {} attempt {attempt} failed: {m}", request.request_index);
                    thread::sleep(self.retry.backoff(attempt));
                }
                Err(BackendError::Fatal(m)) => return failed(FailureReason::Transport(m), attempt),
                Err(BackendError::Malformed(m)) => {
                    return failed(FailureReason::MalformedResponse(m), attempt)
                }
                Err(e @ BackendError::ReplayMiss { .. }) => {
                    return failed(FailureReason::ReplayMiss(e.to_string()), attempt)
                }
            }
        }
    }

    /// Runs `requests` with at most `parallelism` in flight. Results come back
    /// sorted by `request_index`, one per request, whatever the completion
    /// order.
    pub fn generate_batch(
        &self,
        endpoint: &ModelEndpoint,
        requests: &[GenerationRequest],
        parallelism: usize,
    ) -> Vec<GenerationResult> {
        let workers = parallelism.max(1).min(requests.len().max(1));
        let next = AtomicUsize::new(0);
        let results = Mutex::new(Vec::with_capacity(requests.len()));
        thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(req) = requests.get(i) else { break };
                    let r = self.generate(endpoint, req);
                    results.lock().unwrap().push(r);
                });
            }
        });
        let mut results = results.into_inner().unwrap();
        results.sort_by_key(|r| r.request_index);
        results
    }
}

/// Backend for an endpoint: mock designators map to built-in mocks, anything
/// else is treated as an HTTP base URL.
pub fn backend_for(endpoint: &ModelEndpoint, timeout: Duration) -> Result<Arc<dyn Backend>, String> {
    if let Some(spec) = endpoint.base_url.strip_prefix("mock:") {
        return Ok(Arc::new(FixedLetterMock::from_designator(spec)?));
    }
    if !(endpoint.base_url.starts_with("http://") || endpoint.base_url.starts_with("https://")) {
        return Err(format!("unsupported endpoint `{}`", endpoint.base_url));
    }
    Ok(Arc::new(HttpBackend::new(Box::new(UreqTransport::new(timeout)))))
}
