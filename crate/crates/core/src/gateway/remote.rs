//! OpenAI-compatible completions client with top-logprob capture.

use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::Deserialize;
use serde_json::{json, Value};
use tracing::{debug, warn};

use super::{Backend, Candidate, Completion, DecodeParams, FinishReason, GatewayError, Prefix, TokenStep};

pub const API_KEY_ENV: &str = "FORKSCOPE_API_KEY";
pub const BASE_URL_ENV: &str = "FORKSCOPE_BASE_URL";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ApiFlavor {
    /// `/v1/completions`; supports teacher-forced scoring via `echo`.
    #[default]
    Completions,
    /// `/v1/chat/completions`; generation only.
    Chat,
}

/// Retries apply to transport errors only (connection failures, timeouts,
/// HTTP 429 and 5xx).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            initial_backoff: Duration::from_millis(500),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub flavor: ApiFlavor,
    pub retry: RetryPolicy,
    pub timeout: Duration,
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key: None,
            flavor: ApiFlavor::default(),
            retry: RetryPolicy::default(),
            timeout: Duration::from_secs(120),
        }
    }

    /// Fills base URL and key from `FORKSCOPE_BASE_URL` / `FORKSCOPE_API_KEY`
    /// where not given explicitly.
    pub fn from_env(base_url: Option<String>, model: impl Into<String>) -> Option<Self> {
        let base = base_url.or_else(|| std::env::var(BASE_URL_ENV).ok())?;
        let mut cfg = Self::new(base, model);
        cfg.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Some(cfg)
    }

    fn url(&self, path: &str) -> String {
        let base = self.base_url.trim_end_matches('/');
        if base.ends_with("/v1") {
            format!("{base}/{path}")
        } else {
            format!("{base}/v1/{path}")
        }
    }
}

#[derive(Debug)]
pub struct RemoteBackend {
    cfg: RemoteConfig,
    client: Client,
}

impl RemoteBackend {
    pub fn new(cfg: RemoteConfig) -> Result<Self, GatewayError> {
        let client = Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| GatewayError::Protocol(format!("failed to build HTTP client: {e}")))?;
        Ok(Self { cfg, client })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.cfg
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, GatewayError> {
        let url = self.cfg.url(path);
        let mut backoff = self.cfg.retry.initial_backoff;
        let attempts = self.cfg.retry.attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.post_once(&url, body) {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retryable(msg)) => {
                    warn!(attempt, %url, "request failed: {msg}");
                    last = msg;
                    if attempt < attempts {
                        std::thread::sleep(backoff);
                        backoff *= 2;
                    }
                }
            }
        }
        Err(GatewayError::Transport {
            attempts,
            message: last,
        })
    }

    fn post_once(&self, url: &str, body: &Value) -> Result<Value, Attempt> {
        let mut req = self.client.post(url).json(body);
        if let Some(key) = &self.cfg.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Attempt::Retryable(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Attempt::Retryable(e.to_string()))?;
        if status.is_success() {
            return serde_json::from_str(&text)
                .map_err(|e| Attempt::Fatal(GatewayError::Protocol(format!("invalid JSON body: {e}"))));
        }
        Err(classify(status, text))
    }

    fn completions_body(&self, prefix: &Prefix, params: &DecodeParams) -> Value {
        json!({
            "model": self.cfg.model,
            "prompt": prefix.text(),
            "max_tokens": params.max_tokens,
            "temperature": params.temperature,
            "logprobs": params.top_logprobs,
            "seed": params.seed,
        })
    }

    fn chat_body(&self, prefix: &Prefix, params: &DecodeParams) -> Value {
        let mut messages = vec![json!({"role": "user", "content": prefix.prompt})];
        let mut body = json!({
            "model": self.cfg.model,
            "max_tokens": params.max_tokens,
            "temperature": params.temperature,
            "logprobs": true,
            "top_logprobs": params.top_logprobs,
            "seed": params.seed,
        });
        if !prefix.response.is_empty() {
            // Partial assistant turn; vLLM-style servers continue it in place.
            messages.push(json!({"role": "assistant", "content": prefix.response_text()}));
            body["continue_final_message"] = json!(true);
            body["add_generation_prompt"] = json!(false);
        }
        body["messages"] = Value::Array(messages);
        body
    }
}

enum Attempt {
    Retryable(String),
    Fatal(GatewayError),
}

fn classify(status: StatusCode, body: String) -> Attempt {
    let code = status.as_u16();
    if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
        return Attempt::Retryable(format!("HTTP {code}: {body}"));
    }
    if status == StatusCode::UNAUTHORIZED || status == StatusCode::FORBIDDEN {
        return Attempt::Fatal(GatewayError::Auth {
            status: code,
            message: body,
        });
    }
    let lower = body.to_ascii_lowercase();
    if lower.contains("context length") || lower.contains("maximum context") || lower.contains("context_length") {
        return Attempt::Fatal(GatewayError::ContextOverflow(body));
    }
    if lower.contains("logprobs") {
        return Attempt::Fatal(GatewayError::LogprobsUnsupported(body));
    }
    Attempt::Fatal(GatewayError::Http { status: code, body })
}

// Legacy completions response.
#[derive(Debug, Deserialize)]
struct CompletionsResponse {
    choices: Vec<CompletionsChoice>,
}

#[derive(Debug, Deserialize)]
struct CompletionsChoice {
    #[serde(default)]
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
    #[serde(default)]
    logprobs: Option<CompletionsLogprobs>,
}

#[derive(Debug, Deserialize)]
struct CompletionsLogprobs {
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    top_logprobs: Option<Vec<Option<serde_json::Map<String, Value>>>>,
    #[serde(default)]
    text_offset: Option<Vec<usize>>,
}

// Chat response.
#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    #[serde(default)]
    finish_reason: Option<String>,
    #[serde(default)]
    logprobs: Option<ChatLogprobs>,
}

#[derive(Debug, Deserialize)]
struct ChatLogprobs {
    content: Option<Vec<ChatTokenLogprob>>,
}

#[derive(Debug, Deserialize)]
struct ChatTokenLogprob {
    token: String,
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<ChatTopLogprob>,
}

#[derive(Debug, Deserialize)]
struct ChatTopLogprob {
    token: String,
    logprob: f64,
}

fn finish(reason: Option<&str>) -> FinishReason {
    match reason {
        Some("length") => FinishReason::Length,
        _ => FinishReason::Stop,
    }
}

fn candidates_from_map(map: &serde_json::Map<String, Value>) -> Result<Vec<Candidate>, GatewayError> {
    map.iter()
        .map(|(tok, lp)| {
            let lp = lp
                .as_f64()
                .ok_or_else(|| GatewayError::Protocol(format!("non-numeric logprob for {tok:?}")))?;
            Ok(Candidate {
                token: tok.clone(),
                prob: lp.exp(),
            })
        })
        .collect()
}

fn parse_completions(body: Value, prefix: &Prefix, top_n: usize) -> Result<Completion, GatewayError> {
    let resp: CompletionsResponse =
        serde_json::from_value(body).map_err(|e| GatewayError::Protocol(e.to_string()))?;
    let choice = resp
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| GatewayError::Protocol("response has no choices".into()))?;
    let lp = choice
        .logprobs
        .ok_or_else(|| GatewayError::LogprobsUnsupported("choice carries no logprobs".into()))?;
    let tops = lp
        .top_logprobs
        .ok_or_else(|| GatewayError::LogprobsUnsupported("choice carries no top_logprobs".into()))?;
    if tops.len() != lp.tokens.len() || lp.token_logprobs.len() != lp.tokens.len() {
        return Err(GatewayError::Protocol("logprob arrays differ in length".into()));
    }
    let mut steps = Vec::with_capacity(lp.tokens.len());
    for (i, ((token, logprob), top)) in lp.tokens.into_iter().zip(lp.token_logprobs).zip(tops).enumerate() {
        let logprob = logprob.ok_or_else(|| GatewayError::Protocol(format!("null logprob at step {}", i + 1)))?;
        let top = top.ok_or_else(|| GatewayError::LogprobsUnsupported(format!("null top_logprobs at step {}", i + 1)))?;
        let candidates = candidates_from_map(&top)?;
        if candidates.is_empty() {
            return Err(GatewayError::LogprobsUnsupported(format!("empty top_logprobs at step {}", i + 1)));
        }
        steps.push(TokenStep::new(i + 1, token, logprob, candidates, top_n));
    }
    let text: String = steps.iter().map(|s| s.token.as_str()).collect();
    if text != choice.text {
        debug!("token concatenation differs from returned text; keeping token concatenation");
    }
    Ok(Completion {
        prompt: prefix.text(),
        steps,
        text,
        finish_reason: finish(choice.finish_reason.as_deref()),
    })
}

fn parse_chat(body: Value, prefix: &Prefix, top_n: usize) -> Result<Completion, GatewayError> {
    let resp: ChatResponse = serde_json::from_value(body).map_err(|e| GatewayError::Protocol(e.to_string()))?;
    let choice = resp
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| GatewayError::Protocol("response has no choices".into()))?;
    let content = choice
        .logprobs
        .and_then(|l| l.content)
        .ok_or_else(|| GatewayError::LogprobsUnsupported("choice carries no logprobs.content".into()))?;
    let mut steps = Vec::with_capacity(content.len());
    for (i, t) in content.into_iter().enumerate() {
        if t.top_logprobs.is_empty() {
            return Err(GatewayError::LogprobsUnsupported(format!("empty top_logprobs at step {}", i + 1)));
        }
        let candidates = t
            .top_logprobs
            .into_iter()
            .map(|c| Candidate {
                token: c.token,
                prob: c.logprob.exp(),
            })
            .collect();
        steps.push(TokenStep::new(i + 1, t.token, t.logprob, candidates, top_n));
    }
    let text = steps.iter().map(|s| s.token.as_str()).collect();
    Ok(Completion {
        prompt: prefix.text(),
        steps,
        text,
        finish_reason: finish(choice.finish_reason.as_deref()),
    })
}

/// Picks the echoed logprobs that fall inside `text`, given that the echo
/// covers `prompt` followed by `text`. Offsets are in characters.
fn echoed_logprobs(lp: CompletionsLogprobs, prompt: &str, text: &str) -> Result<Vec<f64>, GatewayError> {
    let offsets = lp
        .text_offset
        .ok_or_else(|| GatewayError::ScoringUnsupported("echo response has no text_offset".into()))?;
    let start = prompt.chars().count();
    let end = start + text.chars().count();
    let mut out = Vec::new();
    for (i, off) in offsets.into_iter().enumerate() {
        if off < start || off >= end {
            continue;
        }
        let lp = lp
            .token_logprobs
            .get(i)
            .copied()
            .flatten()
            .ok_or_else(|| GatewayError::ScoringUnsupported(format!("no logprob for echoed token {i}")))?;
        out.push(lp);
    }
    Ok(out)
}

impl Backend for RemoteBackend {
    fn complete(&self, prefix: &Prefix, params: &DecodeParams) -> Result<Completion, GatewayError> {
        match self.cfg.flavor {
            ApiFlavor::Completions => {
                let body = self.post("completions", &self.completions_body(prefix, params))?;
                parse_completions(body, prefix, params.top_logprobs)
            }
            ApiFlavor::Chat => {
                let body = self.post("chat/completions", &self.chat_body(prefix, params))?;
                parse_chat(body, prefix, params.top_logprobs)
            }
        }
    }

    fn score(&self, prompt: &str, text: &str) -> Result<Vec<f64>, GatewayError> {
        if self.cfg.flavor == ApiFlavor::Chat {
            return Err(GatewayError::ScoringUnsupported(
                "chat completions cannot teacher-force a fixed response".into(),
            ));
        }
        let body = json!({
            "model": self.cfg.model,
            "prompt": format!("{prompt}{text}"),
            "max_tokens": 1,
            "temperature": 0.0,
            "logprobs": 1,
            "echo": true,
        });
        let resp: CompletionsResponse = serde_json::from_value(self.post("completions", &body)?)
            .map_err(|e| GatewayError::Protocol(e.to_string()))?;
        let lp = resp
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.logprobs)
            .ok_or_else(|| GatewayError::ScoringUnsupported("echo response carries no logprobs".into()))?;
        echoed_logprobs(lp, prompt, text)
    }

    fn describe(&self) -> String {
        format!("remote({} @ {})", self.cfg.model, self.cfg.base_url)
    }
}
