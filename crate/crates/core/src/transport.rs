//! Minimal HTTP transport layer.
//!
//! Every network-facing operation takes a `&dyn Transport` so tests and the
//! `--offline` pipeline can substitute a replay implementation that never
//! opens a socket.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use crate::error::{Error, Result};

/// Number of requests issued through [`LiveTransport`] in this process.
static LIVE_REQUESTS: AtomicUsize = AtomicUsize::new(0);

pub fn live_request_count() -> usize {
    LIVE_REQUESTS.load(Ordering::SeqCst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Get,
    Post,
}

#[derive(Debug, Clone)]
pub struct HttpRequest {
    pub method: Method,
    pub url: String,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl HttpRequest {
    pub fn get(url: impl Into<String>) -> Self {
        Self {
            method: Method::Get,
            url: url.into(),
            headers: Vec::new(),
            body: Vec::new(),
        }
    }

    pub fn post(url: impl Into<String>, body: impl Into<Vec<u8>>) -> Self {
        Self {
            method: Method::Post,
            url: url.into(),
            headers: Vec::new(),
            body: body.into(),
        }
    }

    pub fn header(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.headers.push((name.into(), value.into()));
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: Vec<u8>,
}

impl HttpResponse {
    pub fn ok(body: impl Into<Vec<u8>>) -> Self {
        Self {
            status: 200,
            body: body.into(),
        }
    }

    pub fn status(status: u16) -> Self {
        Self {
            status,
            body: Vec::new(),
        }
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }

    /// 408, 429 and 5xx are worth retrying.
    pub fn is_transient(&self) -> bool {
        matches!(self.status, 408 | 429) || (500..600).contains(&self.status)
    }
}

/// Sends a single request. Connection-level failures are `Err`, HTTP error
/// statuses are returned as responses so callers can decide what to retry.
pub trait Transport: Send + Sync {
    fn send(&self, request: &HttpRequest) -> Result<HttpResponse>;
}

/// Blocking HTTP client backed by reqwest.
pub struct LiveTransport {
    client: reqwest::blocking::Client,
}

impl LiveTransport {
    pub fn new(timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .user_agent(concat!("geoforge/", env!("CARGO_PKG_VERSION")))
            .build()
            .map_err(|e| Error::Network(e.to_string()))?;
        Ok(Self { client })
    }
}

impl Transport for LiveTransport {
    fn send(&self, request: &HttpRequest) -> Result<HttpResponse> {
        LIVE_REQUESTS.fetch_add(1, Ordering::SeqCst);
        let mut builder = match request.method {
            Method::Get => self.client.get(&request.url),
            Method::Post => self.client.post(&request.url).body(request.body.clone()),
        };
        for (name, value) in &request.headers {
            builder = builder.header(name, value);
        }
        let response = builder
            .send()
            .map_err(|e| Error::Network(format!("{}: {e}", request.url)))?;
        let status = response.status().as_u16();
        let body = response
            .bytes()
            .map_err(|e| Error::Network(format!("{}: {e}", request.url)))?
            .to_vec();
        Ok(HttpResponse { status, body })
    }
}

/// Replays a fixed script of responses in order, recording every request.
#[derive(Default)]
pub struct ScriptedTransport {
    responses: Mutex<VecDeque<Result<HttpResponse>>>,
    requests: Mutex<Vec<HttpRequest>>,
}

impl ScriptedTransport {
    pub fn new(responses: impl IntoIterator<Item = HttpResponse>) -> Self {
        Self {
            responses: Mutex::new(responses.into_iter().map(Ok).collect()),
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn push_error(&self, message: impl Into<String>) {
        self.responses
            .lock()
            .unwrap()
            .push_back(Err(Error::Network(message.into())));
    }

    pub fn requests(&self) -> Vec<HttpRequest> {
        self.requests.lock().unwrap().clone()
    }

    pub fn call_count(&self) -> usize {
        self.requests.lock().unwrap().len()
    }
}

impl Transport for ScriptedTransport {
    fn send(&self, request: &HttpRequest) -> Result<HttpResponse> {
        self.requests.lock().unwrap().push(request.clone());
        self.responses
            .lock()
            .unwrap()
            .pop_front()
            .unwrap_or_else(|| Err(Error::Network("replay script exhausted".into())))
    }
}

/// Serves requests from files under a directory: the request URL (with any
/// `scheme://host/` prefix and query string removed) is a path relative to
/// the root. Missing files answer 404.
pub struct DirReplayTransport {
    root: PathBuf,
    calls: AtomicUsize,
}

impl DirReplayTransport {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn resolve(&self, url: &str) -> PathBuf {
        let without_query = url.split('?').next().unwrap_or(url);
        let relative = match without_query.split_once("://") {
            Some((_, rest)) => rest.split_once('/').map(|(_, p)| p).unwrap_or(""),
            None => without_query,
        };
        self.root.join(relative.trim_start_matches('/'))
    }
}

impl Transport for DirReplayTransport {
    fn send(&self, request: &HttpRequest) -> Result<HttpResponse> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let path = self.resolve(&request.url);
        match std::fs::read(&path) {
            Ok(body) => Ok(HttpResponse::ok(body)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(HttpResponse::status(404)),
            Err(e) => Err(e.into()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
    pub factor: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(500),
            factor: 2,
        }
    }
}

impl RetryPolicy {
    pub fn no_delay() -> Self {
        Self {
            base_delay: Duration::ZERO,
            ..Self::default()
        }
    }

    pub fn delay_before(&self, attempt: u32) -> Duration {
        if attempt == 0 {
            Duration::ZERO
        } else {
            self.base_delay * self.factor.saturating_pow(attempt - 1)
        }
    }
}

/// Sends `request`, retrying transport failures and transient statuses with
/// exponential backoff. Non-transient error statuses are returned to the
/// caller untouched.
pub fn send_with_retry(
    transport: &dyn Transport,
    request: &HttpRequest,
    policy: &RetryPolicy,
) -> Result<HttpResponse> {
    let attempts = policy.attempts.max(1);
    let mut last_failure = String::new();
    for attempt in 0..attempts {
        let delay = policy.delay_before(attempt);
        if !delay.is_zero() {
            thread::sleep(delay);
        }
        match transport.send(request) {
            Ok(response) if response.is_transient() => {
                log::warn!(
                    "{} returned {} (attempt {}/{attempts})",
                    request.url,
                    response.status,
                    attempt + 1
                );
                last_failure = format!("HTTP {}", response.status);
            }
            Ok(response) => return Ok(response),
            Err(Error::Network(msg)) => {
                log::warn!("{} failed: {msg} (attempt {}/{attempts})", request.url, attempt + 1);
                last_failure = msg;
            }
            Err(other) => return Err(other),
        }
    }
    Err(Error::Network(format!(
        "{} failed after {attempts} attempts: {last_failure}",
        request.url
    )))
}
