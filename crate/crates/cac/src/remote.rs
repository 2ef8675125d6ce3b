//! HTTP clients for OpenAI-compatible chat-completions and embeddings
//! endpoints.

use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use cac_core::backend::{self, BackendError, BackendRequest, BackendResponse, ModelBackend, RequestMode};
use cac_core::embedder::{EmbedError, Embedder, EmbedderConfig, EmbeddingVector};
use cac_core::teacher::{TeacherBackend, TeacherReply, TeacherTurn, ToolCall};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

/// One chat-completions endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteChatConfig {
    /// Full endpoint URL, e.g. `http://127.0.0.1:8000/v1/chat/completions`.
    pub url: String,
    pub model: String,
    /// Environment variable holding a bearer token.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
    pub retries: u32,
    pub backoff_ms: u64,
    pub top_logprobs: u32,
    pub max_generation_tokens: u32,
    pub max_teacher_tokens: u32,
}

impl Default for RemoteChatConfig {
    fn default() -> Self {
        Self {
            url: String::new(),
            model: String::new(),
            api_key_env: None,
            timeout_secs: 120,
            retries: 2,
            backoff_ms: 500,
            top_logprobs: 20,
            max_generation_tokens: 256,
            max_teacher_tokens: 2048,
        }
    }
}

struct Http {
    agent: ureq::Agent,
    url: String,
    token: Option<String>,
    retries: u32,
    backoff_ms: u64,
}

impl Http {
    fn new(url: &str, api_key_env: Option<&str>, timeout_secs: u64, retries: u32, backoff_ms: u64) -> Result<Self, String> {
        if url.is_empty() {
            return Err("remote endpoint url is empty".into());
        }
        let token = match api_key_env {
            Some(name) => Some(std::env::var(name).map_err(|_| format!("environment variable {name} is not set"))?),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            agent,
            url: url.to_owned(),
            token,
            retries,
            backoff_ms,
        })
    }

    fn post_once(&self, body: &Value) -> Result<Value, (Option<u16>, String, bool)> {
        let mut req = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = req.send_json(body).map_err(|e| (None, e.to_string(), true))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| (Some(status), e.to_string(), true))?;
        if !(200..300).contains(&status) {
            let retryable = status == 429 || status >= 500;
            return Err((Some(status), text, retryable));
        }
        serde_json::from_str(&text).map_err(|e| (Some(status), format!("response is not JSON: {e}"), false))
    }

    /// POSTs with bounded retries and exponential backoff.
    fn post(&self, body: &Value) -> Result<Value, (Option<u16>, String, bool)> {
        let mut attempt = 0;
        loop {
            match self.post_once(body) {
                Err((_, _, true)) if attempt < self.retries => {
                    std::thread::sleep(Duration::from_millis(self.backoff_ms << attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

fn transport((status, message, retryable): (Option<u16>, String, bool)) -> BackendError {
    BackendError::Transport {
        status,
        message,
        retryable,
    }
}

/// Top-logprob entries of the first generated token.
pub fn first_token_top_logprobs(response: &Value) -> Option<Vec<(String, f64)>> {
    let list = response
        .pointer("/choices/0/logprobs/content/0/top_logprobs")?
        .as_array()?;
    list.iter()
        .map(|e| Some((e.get("token")?.as_str()?.to_owned(), e.get("logprob")?.as_f64()?)))
        .collect()
}

/// Picks the requested tokens out of a top-logprob list and log-softmaxes
/// them. A token matches when it equals the request after trimming
/// whitespace; the best-scoring variant is used. Requested tokens absent from
/// the list get the lowest observed logprob. If none are present, the call
/// fails.
pub fn extract_logprobs(top: &[(String, f64)], requested: &[String]) -> Result<BTreeMap<String, f64>, BackendError> {
    let floor = top.iter().map(|(_, l)| *l).fold(f64::INFINITY, f64::min);
    let mut found = BTreeMap::new();
    for want in requested {
        let best = top
            .iter()
            .filter(|(t, _)| t.trim() == want)
            .map(|(_, l)| *l)
            .fold(f64::NEG_INFINITY, f64::max);
        if best.is_finite() {
            found.insert(want.clone(), best);
        }
    }
    if found.is_empty() {
        return Err(BackendError::MissingTokens {
            missing: requested.to_vec(),
        });
    }
    let raw: BTreeMap<String, f64> = requested
        .iter()
        .map(|t| (t.clone(), found.get(t).copied().unwrap_or(floor)))
        .collect();
    Ok(backend::log_softmax(&raw))
}

pub struct RemoteBackend {
    cfg: RemoteChatConfig,
    http: Http,
}

impl RemoteBackend {
    pub fn new(cfg: RemoteChatConfig) -> Result<Self, BackendError> {
        let http = Http::new(&cfg.url, cfg.api_key_env.as_deref(), cfg.timeout_secs, cfg.retries, cfg.backoff_ms)
            .map_err(BackendError::config)?;
        Ok(Self { cfg, http })
    }

    pub fn config(&self) -> &RemoteChatConfig {
        &self.cfg
    }

    fn body(&self, prompt: &str, mode: &RequestMode) -> Value {
        let messages = json!([{ "role": "user", "content": prompt }]);
        match mode {
            RequestMode::GenerateContent { .. } => json!({
                "model": self.cfg.model,
                "messages": messages,
                "max_tokens": self.cfg.max_generation_tokens,
                "temperature": 0,
            }),
            _ => json!({
                "model": self.cfg.model,
                "messages": messages,
                "max_tokens": 1,
                "temperature": 0,
                "logprobs": true,
                "top_logprobs": self.cfg.top_logprobs,
            }),
        }
    }

    /// Checks at startup that the endpoint answers and returns logprobs.
    pub fn probe(&self) -> Result<(), BackendError> {
        let body = self.body("Reply with the single letter A.\nANSWER:", &RequestMode::ActionLogprobs);
        let response = self.http.post(&body).map_err(transport)?;
        match first_token_top_logprobs(&response) {
            Some(top) if !top.is_empty() => Ok(()),
            _ => Err(BackendError::config(
                "endpoint does not return top_logprobs; logprob support is required",
            )),
        }
    }
}

impl ModelBackend for RemoteBackend {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let body = self.body(&request.prompt, &request.mode);
        let response = self.http.post(&body).map_err(transport)?;
        let raw = json!({ "request": body, "response": response });
        match &request.mode {
            RequestMode::GenerateContent { .. } => {
                let text = response
                    .pointer("/choices/0/message/content")
                    .and_then(Value::as_str)
                    .ok_or_else(|| BackendError::invalid("no choices[0].message.content"))?;
                Ok(BackendResponse {
                    logprobs: BTreeMap::new(),
                    text: text.to_owned(),
                    raw,
                })
            }
            mode => {
                let top = first_token_top_logprobs(&response).ok_or_else(|| {
                    BackendError::config("response has no top_logprobs; logprob support is required")
                })?;
                Ok(BackendResponse {
                    logprobs: extract_logprobs(&top, &mode.requested_tokens())?,
                    text: String::new(),
                    raw,
                })
            }
        }
    }
}

/// Parses the first JSON object in a message as a tool call.
pub fn parse_tool_call(content: &str) -> TeacherReply {
    let parsed = match (content.find('{'), content.rfind('}')) {
        (Some(a), Some(b)) if a < b => serde_json::from_str::<ToolCall>(&content[a..=b]).ok(),
        _ => None,
    };
    match parsed {
        Some(call) => TeacherReply::Call { call },
        None => TeacherReply::Malformed { raw: content.to_owned() },
    }
}

/// Teacher driven by a chat model that answers each turn with one JSON tool
/// call. Earlier calls and their results are replayed as conversation turns.
pub struct RemoteTeacher {
    cfg: RemoteChatConfig,
    http: Http,
}

impl RemoteTeacher {
    pub fn new(cfg: RemoteChatConfig) -> Result<Self, BackendError> {
        let http = Http::new(&cfg.url, cfg.api_key_env.as_deref(), cfg.timeout_secs, cfg.retries, cfg.backoff_ms)
            .map_err(BackendError::config)?;
        Ok(Self { cfg, http })
    }
}

impl TeacherBackend for RemoteTeacher {
    fn next_call(&self, turn: &TeacherTurn<'_>) -> Result<TeacherReply, BackendError> {
        let mut messages = vec![json!({ "role": "user", "content": turn.prompt })];
        for x in turn.exchanges {
            let said = match &x.reply {
                TeacherReply::Call { call } => serde_json::to_string(call).expect("tool calls serialize"),
                TeacherReply::Malformed { raw } => raw.clone(),
            };
            messages.push(json!({ "role": "assistant", "content": said }));
            messages.push(json!({
                "role": "user",
                "content": format!("RESULT {}", serde_json::to_string(&x.result).expect("results serialize")),
            }));
        }
        let body = json!({
            "model": self.cfg.model,
            "messages": messages,
            "max_tokens": self.cfg.max_teacher_tokens,
            "temperature": 0,
        });
        let response = self.http.post(&body).map_err(transport)?;
        let content = response
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::invalid("no choices[0].message.content"))?;
        Ok(parse_tool_call(content))
    }
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut free = self.free.lock().expect("semaphore poisoned");
        while *free == 0 {
            free = self.cv.wait(free).expect("semaphore poisoned");
        }
        *free -= 1;
        SemaphoreGuard(self)
    }
}

struct SemaphoreGuard<'a>(&'a Semaphore);

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("semaphore poisoned") += 1;
        self.0.cv.notify_one();
    }
}

/// Client for an embeddings endpoint speaking `{model, input}` →
/// `{data: [{embedding}]}`. Vectors are L2-normalized on arrival.
pub struct RemoteEmbedder {
    config: EmbedderConfig,
    http: Http,
    model: String,
    slots: Semaphore,
}

const EMBED_CHUNK: usize = 64;

impl RemoteEmbedder {
    pub fn new(config: EmbedderConfig) -> Result<Self, EmbedError> {
        config.validate()?;
        let endpoint = config
            .remote
            .clone()
            .ok_or_else(|| EmbedError::Config("remote embedder requires an endpoint".into()))?;
        let http = Http::new(&endpoint.url, endpoint.api_key_env.as_deref(), 120, 2, 500).map_err(EmbedError::Config)?;
        Ok(Self {
            model: endpoint.model,
            slots: Semaphore {
                free: Mutex::new(endpoint.max_concurrency.max(1)),
                cv: Condvar::new(),
            },
            config,
            http,
        })
    }

    fn request(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let _slot = self.slots.acquire();
        let body = json!({ "model": self.model, "input": texts });
        let response = self.http.post(&body).map_err(|(status, message, retryable)| EmbedError::Backend {
            status,
            message,
            retryable,
        })?;
        let data = response
            .get("data")
            .and_then(Value::as_array)
            .filter(|d| d.len() == texts.len())
            .ok_or_else(|| EmbedError::Backend {
                status: None,
                message: "response data does not match the inputs".into(),
                retryable: false,
            })?;
        data.iter()
            .map(|item| {
                let values: Vec<f64> = item
                    .get("embedding")
                    .and_then(Value::as_array)
                    .map(|a| a.iter().filter_map(Value::as_f64).collect())
                    .unwrap_or_default();
                if values.len() != self.config.dimension {
                    return Err(EmbedError::DimensionMismatch {
                        expected: self.config.dimension,
                        found: values.len(),
                    });
                }
                Ok(EmbeddingVector::normalized(values))
            })
            .collect()
    }
}

impl Embedder for RemoteEmbedder {
    fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        Ok(self.request(&[text])?.remove(0))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(EMBED_CHUNK) {
            out.extend(self.request(chunk)?);
        }
        Ok(out)
    }
}
