#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use axum::extract::State;
use axum::routing::post;
use axum::{Json, Router};
use cac::server::{self, ServerHandle};
use cac_core::backend::{ActionTag, BackendRequest, ModelBackend, RequestMode, ScriptedBackend};
use cac_core::fixtures;
use cac_core::store;
use serde_json::{json, Value};

pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

/// Runs the `cac` binary in `dir` with a clean `CAC_*` environment.
pub fn cac(dir: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cac"));
    cmd.args(args).current_dir(dir);
    for (k, _) in std::env::vars() {
        if k.starts_with("CAC_") {
            cmd.env_remove(k);
        }
    }
    let out = cmd.output().expect("cac runs");
    Output {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

/// Writes kb.jsonl, corpus.jsonl and scripted.toml for the four-DM example.
pub fn write_fiber(dir: &Path) {
    let (kb, _) = fixtures::fiber_kb();
    std::fs::write(dir.join("kb.jsonl"), store::kb_to_string(&kb)).unwrap();
    std::fs::write(dir.join("corpus.jsonl"), store::corpus_to_string(&[fixtures::fiber_problem()])).unwrap();
    std::fs::write(dir.join("scripted.toml"), fixtures::fiber_table().to_toml()).unwrap();
}

/// Writes corpus.jsonl, agent.toml and teacher.toml for a synthetic corpus.
pub fn write_corpus(dir: &Path, turns: &[usize]) {
    let c = fixtures::scripted_corpus(turns);
    std::fs::write(dir.join("corpus.jsonl"), store::corpus_to_string(&c.problems)).unwrap();
    std::fs::write(dir.join("agent.toml"), c.agent_table.to_toml()).unwrap();
    std::fs::write(dir.join("teacher.toml"), toml::to_string(&c.teacher_table).unwrap()).unwrap();
}

pub fn read(path: impl AsRef<Path>) -> String {
    let path = path.as_ref();
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

// ---------------------------------------------------------------------------
// Mock chat-completions endpoint

struct Mock {
    backend: ScriptedBackend,
    requests: AtomicUsize,
}

/// The request mode a prompt was rendered for, recovered from its final line.
fn mode_of(prompt: &str) -> RequestMode {
    let last = prompt.lines().last().unwrap_or("");
    match last {
        "SUBGOAL:" => RequestMode::GenerateContent { tag: ActionTag::G },
        "UPDATE:" => RequestMode::GenerateContent { tag: ActionTag::R },
        "ANSWER:" => RequestMode::GenerateContent { tag: ActionTag::A },
        "OPTION:" => RequestMode::OptionLogprobs {
            letters: ["A", "B", "C", "D"].map(String::from).to_vec(),
        },
        _ => RequestMode::ActionLogprobs,
    }
}

async fn chat(State(mock): State<Arc<Mock>>, Json(body): Json<Value>) -> Json<Value> {
    mock.requests.fetch_add(1, Ordering::SeqCst);
    let prompt = body["messages"][0]["content"].as_str().unwrap_or("").to_owned();
    let wants_logprobs = body["logprobs"].as_bool().unwrap_or(false);
    let mut mode = mode_of(&prompt);
    if wants_logprobs && matches!(mode, RequestMode::GenerateContent { .. }) {
        mode = RequestMode::ActionLogprobs;
    }
    let resp = mock
        .backend
        .complete(&BackendRequest { prompt, mode })
        .expect("scripted backend answers");
    if !wants_logprobs {
        return Json(json!({
            "id": "mock",
            "object": "chat.completion",
            "choices": [{ "index": 0, "message": { "role": "assistant", "content": resp.text }, "finish_reason": "stop" }],
        }));
    }
    // Leading spaces and an extra distractor token mimic real tokenizers.
    let mut top: Vec<Value> = resp
        .logprobs
        .iter()
        .map(|(tok, lp)| json!({ "token": format!(" {tok}"), "logprob": lp, "bytes": null }))
        .collect();
    top.push(json!({ "token": "The", "logprob": -9.5, "bytes": null }));
    Json(json!({
        "id": "mock",
        "object": "chat.completion",
        "choices": [{
            "index": 0,
            "message": { "role": "assistant", "content": "x" },
            "logprobs": { "content": [{ "token": "x", "logprob": -0.1, "top_logprobs": top }] },
            "finish_reason": "length",
        }],
    }))
}

pub struct MockEndpoint {
    mock: Arc<Mock>,
    handle: ServerHandle,
}

impl MockEndpoint {
    pub fn start(backend: ScriptedBackend) -> Self {
        let mock = Arc::new(Mock {
            backend,
            requests: AtomicUsize::new(0),
        });
        let app = Router::new()
            .route("/v1/chat/completions", post(chat))
            .with_state(mock.clone());
        let handle = server::spawn(app, SocketAddr::from(([127, 0, 0, 1], 0))).unwrap();
        Self { mock, handle }
    }

    pub fn url(&self) -> String {
        self.handle.url("/v1/chat/completions")
    }

    pub fn requests(&self) -> usize {
        self.mock.requests.load(Ordering::SeqCst)
    }

    /// A remote agent profile pointing at this endpoint.
    pub fn write_profile(&self, path: &Path) -> PathBuf {
        let text = format!(
            "kind = \"remote\"\n[remote]\nurl = \"{}\"\nmodel = \"mock\"\nretries = 0\ntimeout_secs = 10\n",
            self.url()
        );
        std::fs::write(path, text).unwrap();
        path.to_owned()
    }
}
