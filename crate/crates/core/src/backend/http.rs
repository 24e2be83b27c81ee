//! OpenAI-compatible chat-completions client.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, GenerationRequest, GenerationResponse};
use crate::error::{Error, Result};
use crate::uncertainty::TokenDistribution;

/// Environment variable holding the bearer token.
pub const API_KEY_ENV: &str = "FERA_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            initial_backoff: Duration::from_secs(1),
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    fn backoff(&self, attempt: u32) -> Duration {
        self.initial_backoff
            .mul_f64(self.multiplier.powi(attempt.saturating_sub(1) as i32))
    }
}

/// Counting semaphore bounding in-flight requests.
struct Permits {
    free: Mutex<usize>,
    released: Condvar,
}

struct Permit<'a>(&'a Permits);

impl Permits {
    fn new(n: usize) -> Self {
        Permits {
            free: Mutex::new(n),
            released: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("permit lock poisoned");
        while *free == 0 {
            free = self.released.wait(free).expect("permit lock poisoned");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("permit lock poisoned") += 1;
        self.0.released.notify_one();
    }
}

/// Shared HTTP plumbing: client, credentials, retries and concurrency cap.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    api_key: Option<String>,
    retry: RetryPolicy,
    permits: Permits,
}

impl HttpTransport {
    pub fn new(api_key: Option<String>, timeout_secs: u64, retry: RetryPolicy, max_in_flight: usize) -> Result<Self> {
        if max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be positive".into()));
        }
        if retry.max_attempts == 0 {
            return Err(Error::Config("max_attempts must be positive".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(timeout_secs))
            .build()
            .map_err(|e| Error::Backend {
                status: None,
                message: format!("cannot build HTTP client: {e}"),
            })?;
        Ok(HttpTransport {
            client,
            api_key,
            retry,
            permits: Permits::new(max_in_flight),
        })
    }
}

enum Attempt {
    Done(Value),
    Transient(Error),
    Fatal(Error),
}

fn attempt(transport: &HttpTransport, url: &str, body: &Value) -> Attempt {
    let mut req = transport.client.post(url).json(body);
    if let Some(key) = &transport.api_key {
        req = req.bearer_auth(key);
    }
    let resp = match req.send() {
        Ok(r) => r,
        Err(e) => {
            let err = Error::Backend {
                status: e.status().map(|s| s.as_u16()),
                message: e.to_string(),
            };
            return if e.is_builder() {
                Attempt::Fatal(err)
            } else {
                Attempt::Transient(err)
            };
        }
    };
    let status = resp.status();
    if status.is_success() {
        return match resp.json::<Value>() {
            Ok(v) => Attempt::Done(v),
            Err(e) => Attempt::Fatal(Error::Backend {
                status: Some(status.as_u16()),
                message: format!("response is not JSON: {e}"),
            }),
        };
    }
    let text = resp.text().unwrap_or_default();
    let err = Error::Backend {
        status: Some(status.as_u16()),
        message: text.chars().take(500).collect(),
    };
    if status.as_u16() == 429 || status.is_server_error() {
        Attempt::Transient(err)
    } else {
        Attempt::Fatal(err)
    }
}

/// POSTs a JSON body, retrying transient failures with exponential backoff.
pub(crate) fn post_json(transport: &HttpTransport, url: &str, body: &Value) -> Result<Value> {
    let _permit = transport.permits.acquire();
    let mut tries = 0;
    loop {
        tries += 1;
        match attempt(transport, url, body) {
            Attempt::Done(v) => return Ok(v),
            Attempt::Fatal(e) => return Err(e),
            Attempt::Transient(e) if tries >= transport.retry.max_attempts => return Err(e),
            Attempt::Transient(e) => {
                let wait = transport.retry.backoff(tries);
                warn!("request to {url} failed ({e}); retry {tries} in {wait:?}");
                thread::sleep(wait);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpBackendConfig {
    pub base_url: String,
    pub model: String,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        HttpBackendConfig {
            base_url: "http://localhost:8000/v1".into(),
            model: "default".into(),
            timeout_secs: 120,
            max_in_flight: 8,
            max_attempts: 3,
            initial_backoff_ms: 1000,
        }
    }
}

impl HttpBackendConfig {
    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_attempts: self.max_attempts,
            initial_backoff: Duration::from_millis(self.initial_backoff_ms),
            multiplier: 2.0,
        }
    }
}

pub struct HttpBackend {
    config: HttpBackendConfig,
    transport: HttpTransport,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig, api_key: Option<String>) -> Result<Self> {
        let transport = HttpTransport::new(
            api_key,
            config.timeout_secs,
            config.retry_policy(),
            config.max_in_flight,
        )?;
        Ok(HttpBackend { config, transport })
    }

    /// Reads the API key from `FERA_API_KEY` when set.
    pub fn from_env(config: HttpBackendConfig) -> Result<Self> {
        Self::new(config, std::env::var(API_KEY_ENV).ok())
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }
}

/// The JSON body sent for `request`. Only rendered prompt text and
/// sampling parameters appear here.
pub fn request_body(model: &str, request: &GenerationRequest) -> Value {
    let mut messages = Vec::new();
    if let Some(system) = &request.system {
        messages.push(json!({"role": "system", "content": system}));
    }
    messages.push(json!({"role": "user", "content": request.prompt}));
    let mut body = json!({
        "model": model,
        "messages": messages,
        "max_tokens": request.max_tokens,
        "temperature": request.temperature,
        "top_p": request.top_p,
        "logprobs": request.want_logprobs,
    });
    if request.want_logprobs {
        body["top_logprobs"] = json!(request.top_logprobs);
    }
    body
}

#[derive(Deserialize)]
struct TopLogprob {
    #[serde(default)]
    token: String,
    logprob: f64,
}

#[derive(Deserialize)]
struct TokenLogprob {
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<TopLogprob>,
}

#[derive(Deserialize)]
struct Logprobs {
    #[serde(default)]
    content: Option<Vec<TokenLogprob>>,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
    #[serde(default)]
    logprobs: Option<Logprobs>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

/// Maps a chat-completions response body to a [`GenerationResponse`].
/// Top log-probabilities are exponentiated; token ids are positions in
/// the returned list, since the wire format carries token strings.
pub fn parse_chat_response(body: &Value) -> Result<GenerationResponse> {
    let parsed: ChatResponse = serde_json::from_value(body.clone()).map_err(|e| Error::Backend {
        status: None,
        message: format!("malformed chat response: {e}"),
    })?;
    let choice = parsed.choices.into_iter().next().ok_or_else(|| Error::Backend {
        status: None,
        message: "chat response has no choices".into(),
    })?;
    let text = choice.message.content.unwrap_or_default();
    let content = choice.logprobs.and_then(|l| l.content);
    let (token_dists, token_logprobs) = match content {
        None => (None, None),
        Some(tokens) => {
            let chosen: Vec<f64> = tokens.iter().map(|t| t.logprob).collect();
            let dists = if tokens.iter().all(|t| !t.top_logprobs.is_empty()) && !tokens.is_empty() {
                let mut dists = Vec::with_capacity(tokens.len());
                for t in &tokens {
                    let logprobs: Vec<(u32, f64)> = t
                        .top_logprobs
                        .iter()
                        .enumerate()
                        .map(|(i, top)| (i as u32, top.logprob.min(0.0)))
                        .collect();
                    debug!(
                        "top tokens: {:?}",
                        t.top_logprobs.iter().map(|x| &x.token).collect::<Vec<_>>()
                    );
                    dists.push(TokenDistribution::from_logprobs(&logprobs)?);
                }
                Some(dists)
            } else {
                None
            };
            (dists, Some(chosen))
        }
    };
    Ok(GenerationResponse {
        text,
        token_dists,
        token_logprobs,
    })
}

impl Backend for HttpBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse> {
        request.validate()?;
        let body = request_body(&self.config.model, request);
        let value = post_json(&self.transport, &self.url(), &body)?;
        parse_chat_response(&value)
    }

    fn name(&self) -> &str {
        &self.config.model
    }
}
