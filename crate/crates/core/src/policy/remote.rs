//! Remote inference backend adapter.
//!
//! Sends completion requests to a served model and maps the returned token
//! log-probabilities onto delimiter-separated steps. Sampling only: nothing
//! here updates parameters.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{SamplingParams, StepContent, StepSample};
use crate::{Error, Result};

pub const DEFAULT_AUTH_ENV: &str = "IBTPO_API_KEY";

/// Request/response dialect spoken by the endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApiFlavor {
    /// `{prefix, n, ..., logprobs: true}` → `{choices: [{text, token_logprobs, truncated}]}`.
    #[default]
    Native,
    /// OpenAI-compatible `/v1/completions`.
    Openai,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteConfig {
    pub endpoint: String,
    #[serde(default)]
    pub api: ApiFlavor,
    #[serde(default)]
    pub model: Option<String>,
    /// Name of the environment variable holding the bearer token.
    #[serde(default = "default_auth_env")]
    pub auth_env: String,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: usize,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_max_concurrency")]
    pub max_concurrency: usize,
    #[serde(default = "default_delimiter")]
    pub delimiter: String,
}

fn default_auth_env() -> String {
    DEFAULT_AUTH_ENV.into()
}
fn default_max_tokens() -> usize {
    1024
}
fn default_timeout_ms() -> u64 {
    60_000
}
fn default_max_retries() -> usize {
    3
}
fn default_backoff_ms() -> u64 {
    250
}
fn default_max_concurrency() -> usize {
    4
}
fn default_delimiter() -> String {
    crate::env::DEFAULT_DELIMITER.into()
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        RemoteConfig {
            endpoint: endpoint.into(),
            api: ApiFlavor::default(),
            model: None,
            auth_env: default_auth_env(),
            max_tokens: default_max_tokens(),
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            backoff_ms: default_backoff_ms(),
            max_concurrency: default_max_concurrency(),
            delimiter: default_delimiter(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://")) {
            return Err(Error::BackendConfig(format!(
                "endpoint `{}` is not an http(s) URL",
                self.endpoint
            )));
        }
        if self.max_tokens == 0 || self.max_concurrency == 0 {
            return Err(Error::BackendConfig(
                "max_tokens and max_concurrency must be >= 1".into(),
            ));
        }
        if self.delimiter.is_empty() {
            return Err(Error::BackendConfig("step delimiter must not be empty".into()));
        }
        if self.api == ApiFlavor::Openai && self.model.is_none() {
            return Err(Error::BackendConfig("openai flavor requires `model`".into()));
        }
        Ok(())
    }

    fn auth_token(&self) -> Option<String> {
        std::env::var(&self.auth_env).ok().filter(|t| !t.is_empty())
    }
}

/// Body of a native completion request.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompletionRequest<'a> {
    pub prefix: &'a str,
    pub n: usize,
    pub max_tokens: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: usize,
    pub logprobs: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Serialize)]
struct OpenaiRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    n: usize,
    max_tokens: usize,
    temperature: f64,
    top_p: f64,
    top_k: usize,
    logprobs: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

/// One continuation returned by the backend.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub token_logprobs: Vec<f64>,
    pub tokens: Option<Vec<String>>,
    pub truncated: bool,
}

#[derive(Deserialize)]
struct WireLogprobs {
    #[serde(default)]
    tokens: Option<Vec<String>>,
    #[serde(default)]
    token_logprobs: Option<Vec<Option<f64>>>,
}

#[derive(Deserialize)]
struct WireChoice {
    text: String,
    #[serde(default)]
    token_logprobs: Option<Vec<f64>>,
    #[serde(default)]
    tokens: Option<Vec<String>>,
    #[serde(default)]
    truncated: Option<bool>,
    #[serde(default)]
    finish_reason: Option<String>,
    #[serde(default)]
    logprobs: Option<WireLogprobs>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

const MISSING_LOGPROBS: &str =
    "endpoint did not return token log-probabilities; the backend must support logprobs reporting";

/// Parses a completion response in either dialect.
pub fn parse_completion_response(body: &str) -> Result<Vec<Completion>> {
    let wire: WireResponse =
        serde_json::from_str(body).map_err(|e| Error::Format(format!("completion response: {e}")))?;
    wire.choices
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let (lps, tokens) = match (c.token_logprobs, c.logprobs) {
                (Some(lps), _) => (lps, c.tokens),
                (
                    None,
                    Some(WireLogprobs {
                        tokens,
                        token_logprobs: Some(lps),
                    }),
                ) => {
                    let lps = lps
                        .into_iter()
                        .map(|l| l.ok_or_else(|| Error::BackendConfig(MISSING_LOGPROBS.into())))
                        .collect::<Result<Vec<_>>>()?;
                    (lps, tokens.or(c.tokens))
                }
                _ => return Err(Error::BackendConfig(MISSING_LOGPROBS.into())),
            };
            let mut token_logprobs = Vec::with_capacity(lps.len());
            for l in lps {
                if !l.is_finite() || l > 1e-6 {
                    return Err(Error::Format(format!(
                        "choice {i}: token log-probability {l} is not in (-inf, 0]"
                    )));
                }
                token_logprobs.push(l.min(0.0));
            }
            if let Some(t) = &tokens {
                if t.len() != token_logprobs.len() {
                    return Err(Error::Format(format!(
                        "choice {i}: {} tokens but {} log-probabilities",
                        t.len(),
                        token_logprobs.len()
                    )));
                }
            }
            if token_logprobs.is_empty() && !c.text.is_empty() {
                return Err(Error::Format(format!("choice {i}: text without tokens")));
            }
            let truncated = c.truncated.unwrap_or(false) || c.finish_reason.as_deref() == Some("length");
            Ok(Completion {
                text: c.text,
                token_logprobs,
                tokens,
                truncated,
            })
        })
        .collect()
}

/// Byte ranges `[start, end)` of the tokens inside `text`, and whether they
/// come from real token strings.
fn token_spans(c: &Completion) -> (Vec<(usize, usize)>, bool) {
    let n = c.token_logprobs.len();
    if let Some(tokens) = &c.tokens {
        if tokens.concat() == c.text {
            let mut at = 0;
            let spans = tokens
                .iter()
                .map(|t| {
                    let s = (at, at + t.len());
                    at += t.len();
                    s
                })
                .collect();
            return (spans, true);
        }
    }
    let len = c.text.len();
    ((0..n).map(|j| (j * len / n, (j + 1) * len / n)).collect(), false)
}

/// Byte ranges of the non-empty delimiter-separated segments.
fn segments(text: &str, delimiter: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for (at, _) in text.match_indices(delimiter) {
        if at > start {
            out.push((start, at));
        }
        start = at + delimiter.len();
    }
    if start < text.len() {
        out.push((start, text.len()));
    }
    out
}

/// Splits a completion into steps and assigns each token to the step whose
/// region contains its first byte (its midpoint when the backend reported no
/// token strings and spans are spread evenly). Delimiter bytes belong to the
/// preceding step. A step that starts and ends inside a single token reuses that
/// token's log-probability.
pub fn step_samples(c: &Completion, delimiter: &str) -> Result<Vec<StepSample>> {
    let segs = segments(&c.text, delimiter);
    if segs.is_empty() {
        return Ok(Vec::new());
    }
    let (spans, exact) = token_spans(c);
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); segs.len()];
    let region_of = |byte: usize| segs.iter().rposition(|&(s, _)| s <= byte).unwrap_or(0);
    for (&(s, e), &lp) in spans.iter().zip(&c.token_logprobs) {
        let anchor = if exact { s } else { (s + e) / 2 };
        buckets[region_of(anchor)].push(lp);
    }
    segs.iter()
        .zip(buckets)
        .map(|(&(s, e), mut lps)| {
            if lps.is_empty() {
                let j = spans
                    .iter()
                    .position(|&(ts, te)| ts <= s && s < te.max(ts + 1))
                    .or_else(|| spans.iter().rposition(|&(ts, _)| ts <= s))
                    .ok_or_else(|| Error::Format("step without any covering token".into()))?;
                lps.push(c.token_logprobs[j]);
            }
            StepSample::new(StepContent::Text(c.text[s..e].to_string()), lps)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    /// Network failure, timeout, 429 or 5xx.
    Retryable(String),
    Fatal(String),
}

/// Moves one request body to the endpoint and returns the response body.
pub trait Transport: Send + Sync {
    fn post(&self, url: &str, bearer: Option<&str>, body: &str) -> std::result::Result<String, TransportError>;
}

pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::BackendConfig(format!("http client: {e}")))?;
        Ok(HttpTransport { client })
    }
}

impl Transport for HttpTransport {
    fn post(&self, url: &str, bearer: Option<&str>, body: &str) -> std::result::Result<String, TransportError> {
        let mut req = self
            .client
            .post(url)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body.to_string());
        if let Some(token) = bearer {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| TransportError::Retryable(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| TransportError::Retryable(e.to_string()))?;
        if status.is_success() {
            Ok(text)
        } else if status.is_server_error() || status.as_u16() == 429 {
            Err(TransportError::Retryable(format!("HTTP {status}: {text}")))
        } else {
            Err(TransportError::Fatal(format!("HTTP {status}: {text}")))
        }
    }
}

pub struct RemoteClient<T = HttpTransport> {
    config: RemoteConfig,
    transport: T,
}

impl RemoteClient<HttpTransport> {
    pub fn connect(config: RemoteConfig) -> Result<Self> {
        config.validate()?;
        let transport = HttpTransport::new(Duration::from_millis(config.timeout_ms))?;
        Ok(RemoteClient { config, transport })
    }
}

impl<T: Transport> RemoteClient<T> {
    pub fn with_transport(config: RemoteConfig, transport: T) -> Result<Self> {
        config.validate()?;
        Ok(RemoteClient { config, transport })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn body(&self, prefix: &str, n: usize, max_tokens: usize, sampling: &SamplingParams, seed: Option<u64>) -> String {
        match self.config.api {
            ApiFlavor::Native => serde_json::to_string(&CompletionRequest {
                prefix,
                n,
                max_tokens,
                temperature: sampling.temperature,
                top_p: sampling.top_p,
                top_k: sampling.top_k,
                logprobs: true,
                seed,
            }),
            ApiFlavor::Openai => serde_json::to_string(&OpenaiRequest {
                model: self.config.model.as_deref().unwrap_or_default(),
                prompt: prefix,
                n,
                max_tokens,
                temperature: sampling.temperature,
                top_p: sampling.top_p,
                top_k: sampling.top_k,
                logprobs: 1,
                seed,
            }),
        }
        .expect("request serializes")
    }

    /// Requests `n` continuations of `prefix`, retrying transient failures
    /// with exponential backoff.
    pub fn complete(
        &self,
        prefix: &str,
        n: usize,
        max_tokens: usize,
        sampling: &SamplingParams,
        seed: Option<u64>,
    ) -> Result<Vec<Completion>> {
        if n == 0 {
            return Err(Error::InvalidArgument("n must be >= 1".into()));
        }
        sampling.validate()?;
        let body = self.body(prefix, n, max_tokens.min(self.config.max_tokens).max(1), sampling, seed);
        let token = self.config.auth_token();
        let attempts = self.config.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let wait = self
                    .config
                    .backoff_ms
                    .saturating_mul(1 << (attempt - 1).min(16))
                    .min(30_000);
                std::thread::sleep(Duration::from_millis(wait));
            }
            match self.transport.post(&self.config.endpoint, token.as_deref(), &body) {
                Ok(text) => {
                    let out = parse_completion_response(&text)?;
                    if out.len() != n {
                        return Err(Error::Backend {
                            attempts: attempt + 1,
                            message: format!("asked for {n} continuations, got {}", out.len()),
                        });
                    }
                    return Ok(out);
                }
                Err(TransportError::Retryable(m)) => last = m,
                Err(TransportError::Fatal(m)) => {
                    return Err(Error::Backend {
                        attempts: attempt + 1,
                        message: m,
                    })
                }
            }
        }
        Err(Error::Backend {
            attempts,
            message: last,
        })
    }

    /// Issues several requests with at most `max_concurrency` in flight.
    /// Results come back in input order.
    pub fn complete_many(
        &self,
        requests: &[(String, usize)],
        max_tokens: usize,
        sampling: &SamplingParams,
        seed: Option<u64>,
    ) -> Vec<Result<Vec<Completion>>> {
        let mut out = Vec::with_capacity(requests.len());
        for (ci, chunk) in requests.chunks(self.config.max_concurrency).enumerate() {
            let results: Vec<_> = std::thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .enumerate()
                    .map(|(j, (prefix, n))| {
                        let seed =
                            seed.map(|x| crate::seed::derive(x, &[(ci * self.config.max_concurrency + j) as u64]));
                        s.spawn(move || self.complete(prefix, *n, max_tokens, sampling, seed))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("request thread panicked"))
                    .collect()
            });
            out.extend(results);
        }
        out
    }
}
