mod common;

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use cac::server::{self, AppState, ServerHandle};
use cac_core::config::CacConfig;
use cac_core::fixtures;
use cac_core::kb::KnowledgeBase;
use cac_core::backend::BackendError;
use cac_core::store::{self, KbLock};
use cac_core::teacher::{TeacherBackend, TeacherReply, TeacherTurn};
use common::{cac, read, write_corpus, write_fiber};
use serde_json::{json, Value};

fn client() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into()
}

fn start(dir: &Path, tweak: impl FnOnce(&mut CacConfig)) -> ServerHandle {
    let mut cfg = CacConfig::default();
    cfg.paths.kb = dir.join("kb.jsonl");
    cfg.paths.out = dir.join("runs");
    cfg.paths.corpus = Some(dir.join("corpus.jsonl"));
    cfg.backends.agent = Some(dir.join("scripted.toml"));
    tweak(&mut cfg);
    let app = server::router(Arc::new(AppState::new(cfg)), None);
    server::spawn(app, SocketAddr::from(([127, 0, 0, 1], 0))).unwrap()
}

fn get(s: &ServerHandle, path: &str) -> (u16, Value) {
    let mut resp = client().get(&s.url(path)).call().unwrap();
    let status = resp.status().as_u16();
    let body = resp.body_mut().read_to_string().unwrap();
    (status, serde_json::from_str(&body).unwrap_or_else(|e| panic!("{path}: {e}: {body}")))
}

fn get_raw(s: &ServerHandle, path: &str) -> String {
    client().get(&s.url(path)).call().unwrap().body_mut().read_to_string().unwrap()
}

fn post(s: &ServerHandle, path: &str, body: &str) -> (u16, Value) {
    let mut resp = client()
        .post(&s.url(path))
        .content_type("application/json")
        .send(body)
        .unwrap();
    let status = resp.status().as_u16();
    (status, serde_json::from_str(&resp.body_mut().read_to_string().unwrap()).unwrap())
}

fn assert_api_error(body: &Value, code: &str) {
    let obj = body.as_object().expect("object body");
    let mut keys: Vec<&str> = obj.keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(keys, ["code", "detail", "message"], "{body}");
    assert_eq!(body["code"], code, "{body}");
}

fn wait_run(s: &ServerHandle, id: &str) -> Value {
    let deadline = Instant::now() + Duration::from_secs(20);
    loop {
        let (status, body) = get(s, &format!("/api/runs/{id}"));
        assert_eq!(status, 200);
        if body["status"] == "succeeded" || body["status"] == "failed" {
            return body;
        }
        assert!(Instant::now() < deadline, "run {id} did not finish");
        std::thread::sleep(Duration::from_millis(10));
    }
}

#[test]
fn empty_kb_listing() {
    let dir = tempfile::tempdir().unwrap();
    let s = start(dir.path(), |_| {});
    let (status, body) = get(&s, "/api/kb");
    assert_eq!(status, 200);
    assert_eq!(body["items"], json!([]));
    assert_eq!(body["total"], 0);
    assert_eq!(body["revision"], 0);
    let (_, body) = get(&s, "/api/retrieve?goal=anything&wm=&k=3");
    assert_eq!(body["items"], json!([]));
    let (_, body) = get(&s, "/api/traces");
    assert_eq!(body["items"], json!([]));
}

#[test]
fn errors_are_api_errors() {
    let dir = tempfile::tempdir().unwrap();
    write_fiber(dir.path());
    let s = start(dir.path(), |_| {});
    let (status, body) = get(&s, "/api/kb/unknown-id");
    assert_eq!(status, 404);
    assert_api_error(&body, "not_found");
    let (status, body) = get(&s, "/api/nothing");
    assert_eq!(status, 404);
    assert_api_error(&body, "not_found");
    let (status, body) = post(&s, "/api/kb", "{}");
    assert_eq!(status, 405);
    assert_api_error(&body, "validation");
    let (status, body) = get(&s, "/api/kb?limit=many");
    assert_eq!(status, 400);
    assert_api_error(&body, "validation");
    let (status, body) = get(&s, "/api/kb?revision=7");
    assert_eq!(status, 400);
    assert_api_error(&body, "validation");
    let (status, body) = get(&s, "/api/retrieve?goal=&k=3");
    assert_eq!(status, 400);
    assert_api_error(&body, "validation");
    let (status, body) = get(&s, "/api/traces/none/fiber-mcq");
    assert_eq!(status, 404);
    assert_api_error(&body, "not_found");
    let (status, body) = get(&s, "/api/runs/none");
    assert_eq!(status, 404);
    assert_api_error(&body, "not_found");
}

#[test]
fn kb_pagination_and_items() {
    let dir = tempfile::tempdir().unwrap();
    write_fiber(dir.path());
    let s = start(dir.path(), |_| {});
    let (_, page) = get(&s, "/api/kb?limit=2&offset=1");
    assert_eq!(page["total"], 4);
    assert_eq!(page["revision"], 1);
    assert_eq!(page["commits"], json!([4]));
    let (kb, _) = fixtures::fiber_kb();
    let ids: Vec<&str> = page["items"].as_array().unwrap().iter().map(|i| i["id"].as_str().unwrap()).collect();
    assert_eq!(ids, [kb.dms()[1].id.as_str(), kb.dms()[2].id.as_str()]);
    assert!(page["items"][0].get("key_goal").is_none());
    let (status, dm) = get(&s, &format!("/api/kb/{}", kb.dms()[3].id));
    assert_eq!(status, 200);
    let dm: cac_core::kb::DeclarativeMemory = serde_json::from_value(dm).unwrap();
    assert_eq!(dm, kb.dms()[3]);
    let (_, page) = get(&s, "/api/kb?revision=0");
    assert_eq!(page["total"], 0);
    let (_, problems) = get(&s, "/api/problems");
    assert_eq!(problems["items"][0]["id"], "fiber-mcq");
}

#[test]
fn run_without_removals_equals_cli_solve() {
    let dir = tempfile::tempdir().unwrap();
    write_fiber(dir.path());
    let cli = cac(dir.path(), &["solve", "--kb", "kb.jsonl", "--problem", "fiber-mcq", "--backend", "scripted.toml", "--run-id", "cli"]);
    assert_eq!(cli.code, 0, "{}", cli.stderr);
    let s = start(dir.path(), |_| {});
    let (status, accepted) = post(&s, "/api/runs", r#"{"problem_id":"fiber-mcq","removed_dm_ids":[]}"#);
    assert_eq!(status, 202, "{accepted}");
    let id = accepted["run_id"].as_str().unwrap();
    let run = wait_run(&s, id);
    assert_eq!(run["status"], "succeeded", "{run}");
    let attempt: cac_core::agent::AttemptResult = serde_json::from_value(run["result"].clone()).unwrap();
    let cli_trace = read(dir.path().join("runs/cli/traces/fiber-mcq.jsonl"));
    assert_eq!(store::trace_to_string(&attempt), cli_trace);
    // The service run is persisted like any other and listed.
    assert_eq!(read(dir.path().join(format!("runs/{id}/traces/fiber-mcq.jsonl"))), cli_trace);
    let (_, trace) = get(&s, &format!("/api/traces/{id}/fiber-mcq"));
    assert_eq!(trace, run["result"]);
    let (_, listing) = get(&s, "/api/traces");
    let runs: Vec<&str> = listing["items"].as_array().unwrap().iter().map(|r| r["run_id"].as_str().unwrap()).collect();
    assert!(runs.contains(&"cli") && runs.contains(&id));
}

#[test]
fn run_with_removals_is_an_ablation() {
    let dir = tempfile::tempdir().unwrap();
    write_fiber(dir.path());
    let (kb, _) = fixtures::fiber_kb();
    let s = start(dir.path(), |_| {});
    let body = json!({ "problem_id": "fiber-mcq", "removed_dm_ids": [kb.dms()[2].id], "backend_profile": "default" });
    let (status, accepted) = post(&s, "/api/runs", &body.to_string());
    assert_eq!(status, 202);
    let run = wait_run(&s, accepted["run_id"].as_str().unwrap());
    assert_eq!(run["status"], "succeeded", "{run}");
    assert_eq!(run["ablation"]["report"]["verdict"], "knowledge_dependent");
    assert_eq!(run["ablation"]["report"]["divergence_index"], 2);
    let (_, base) = get(&s, &format!("/api/traces/{}/fiber-mcq.base", accepted["run_id"].as_str().unwrap()));
    assert_eq!(base["predicted_letter"], "B");
}

#[test]
fn run_request_validation() {
    let dir = tempfile::tempdir().unwrap();
    write_fiber(dir.path());
    let dead = dir.path().join("dead.toml");
    std::fs::write(&dead, "kind = \"remote\"\n[remote]\nurl = \"http://127.0.0.1:9/v1/chat/completions\"\nretries = 0\ntimeout_secs = 2\n").unwrap();
    let s = start(dir.path(), |cfg| {
        cfg.backends.profiles.insert("dead".into(), dead.clone());
    });
    let (status, body) = post(&s, "/api/runs", r#"{"problem_id":"nope"}"#);
    assert_eq!(status, 404);
    assert_api_error(&body, "not_found");
    let (status, body) = post(&s, "/api/runs", r#"{"problem_id":"fiber-mcq","removed_dm_ids":["dm-x"]}"#);
    assert_eq!(status, 400);
    assert_api_error(&body, "validation");
    assert_eq!(body["detail"]["unknown_ids"], json!(["dm-x"]));
    let (status, body) = post(&s, "/api/runs", r#"{"problem_id":"fiber-mcq","backend_profile":"other"}"#);
    assert_eq!(status, 400);
    assert_api_error(&body, "validation");
    let (status, body) = post(&s, "/api/runs", "not json");
    assert_eq!(status, 400);
    assert_api_error(&body, "validation");
    let (status, accepted) = post(&s, "/api/runs", r#"{"problem_id":"fiber-mcq","backend_profile":"dead"}"#);
    assert_eq!(status, 202);
    let run = wait_run(&s, accepted["run_id"].as_str().unwrap());
    assert_eq!(run["status"], "failed");
    assert_api_error(&run["error"], "backend_unavailable");
    assert_eq!(run["error"]["detail"]["backend_profile"], "dead");
}

#[test]
fn retrieve_matches_cli_inspect() {
    let dir = tempfile::tempdir().unwrap();
    write_fiber(dir.path());
    let s = start(dir.path(), |_| {});
    let cases = [
        ("Solve the problem.", "Working memory is empty at the start of solving.", 3),
        (fixtures::FIBER_SUBGOAL, fixtures::FIBER_WM_UPDATE, 4),
        ("cellulose fiber", "", 1),
    ];
    for (goal, wm, k) in cases {
        let k_str = k.to_string();
        let cli = cac(
            dir.path(),
            &["inspect", "--kb", "kb.jsonl", "--retrieve", "--goal", goal, "--wm", wm, "--k", &k_str, "--json"],
        );
        assert_eq!(cli.code, 0, "{}", cli.stderr);
        let query = format!(
            "/api/retrieve?goal={}&wm={}&k={k}",
            urlencode(goal),
            urlencode(wm)
        );
        assert_eq!(cli.stdout.trim_end(), get_raw(&s, &query));
    }
    // A DM's own conditions retrieve it first with score 1.
    let (kb, _) = fixtures::fiber_kb();
    let dm = &kb.dms()[2];
    let (_, body) = get(
        &s,
        &format!("/api/retrieve?goal={}&wm={}&k=1", urlencode(&dm.goal_condition), urlencode(&dm.wm_condition)),
    );
    assert_eq!(body["items"][0]["id"], dm.id.as_str());
    assert!((body["items"][0]["score"].as_f64().unwrap() - 1.0).abs() < 1e-12);
}

fn urlencode(s: &str) -> String {
    s.bytes()
        .map(|b| match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' => (b as char).to_string(),
            _ => format!("%{b:02X}"),
        })
        .collect()
}

#[test]
fn writer_lock_conflicts_runs_but_not_reads() {
    let dir = tempfile::tempdir().unwrap();
    write_fiber(dir.path());
    let s = start(dir.path(), |_| {});
    let lock = KbLock::acquire(&dir.path().join("kb.jsonl")).unwrap();
    let (status, body) = post(&s, "/api/runs", r#"{"problem_id":"fiber-mcq"}"#);
    assert_eq!(status, 409);
    assert_api_error(&body, "conflict");
    assert_eq!(get(&s, "/api/kb").0, 200);
    assert_eq!(get(&s, "/api/retrieve?goal=x").0, 200);
    drop(lock);
    assert_eq!(post(&s, "/api/runs", r#"{"problem_id":"fiber-mcq"}"#).0, 202);
}

#[test]
fn reads_see_only_committed_revisions() {
    let dir = tempfile::tempdir().unwrap();
    write_fiber(dir.path());
    let kb_path = dir.path().join("kb.jsonl");
    // A writer has appended DM records whose commit line is not written yet.
    let (mut kb, e) = fixtures::fiber_kb();
    kb.append_dms(&fixtures::fiber_drafts(), &cac_core::kb::Provenance::human(1), &e)
        .unwrap();
    let full = store::kb_to_string(&kb);
    let cut = full.trim_end().rfind('\n').unwrap() + 1;
    std::fs::write(&kb_path, &full[..cut]).unwrap();
    let s = start(dir.path(), |_| {});
    let (status, page) = get(&s, "/api/kb");
    assert_eq!(status, 200);
    assert_eq!(page["total"], 4);
    assert_eq!(page["revision"], 1);
    // A half-written record line is ignored as well.
    std::fs::write(&kb_path, &full[..cut - 40]).unwrap();
    assert_eq!(get(&s, "/api/kb").1["total"], 4);
    std::fs::write(&kb_path, &full).unwrap();
    assert_eq!(get(&s, "/api/kb").1["total"], 8);
}

/// Delays each teacher call so reads interleave with appends.
struct SlowTeacher(cac_core::teacher::ScriptedTeacher);

impl TeacherBackend for SlowTeacher {
    fn next_call(&self, turn: &TeacherTurn<'_>) -> Result<TeacherReply, BackendError> {
        std::thread::sleep(Duration::from_millis(5));
        self.0.next_call(turn)
    }
}

#[test]
fn reads_during_a_compile() {
    let dir = tempfile::tempdir().unwrap();
    let turns = [2usize; 12];
    write_corpus(dir.path(), &turns);
    let s = start(dir.path(), |cfg| cfg.backends.agent = Some(dir.path().join("agent.toml")));
    let kb_path = dir.path().join("kb.jsonl");
    let root = dir.path().to_owned();
    let writer = std::thread::spawn(move || {
        let c = fixtures::scripted_corpus(&turns);
        let cfg = CacConfig::default();
        let run = cac::runs::RunDir::create(&root.join("runs"), "c").unwrap();
        let teacher = SlowTeacher(c.teacher());
        cac::runs::compile(&cfg, run, &c.problems, &root.join("kb.jsonl"), None, &c.agent_backend(), &teacher, 1)
            .unwrap()
    });
    let mut seen = Vec::new();
    while !writer.is_finished() {
        let (status, page) = get(&s, "/api/kb?limit=1000");
        assert_eq!(status, 200, "{page}");
        let revision = page["revision"].as_u64().unwrap();
        let total = page["total"].as_u64().unwrap();
        let commits = page["commits"].as_array().unwrap();
        assert_eq!(commits.len() as u64, revision);
        assert_eq!(commits.last().map_or(0, |c| c.as_u64().unwrap()), total);
        assert_eq!(page["items"].as_array().unwrap().len() as u64, total);
        seen.push(revision);
        if KbLock::is_locked(&kb_path) {
            let (status, _) = post(&s, "/api/runs", r#"{"problem_id":"q0"}"#);
            assert!(status == 409 || status == 202);
        }
    }
    let out = writer.join().unwrap();
    assert!(out.all_compiled);
    assert!(seen.windows(2).all(|w| w[0] <= w[1]), "revisions went backwards: {seen:?}");
    seen.dedup();
    assert!(seen.len() > 2, "reads did not overlap the compile: {seen:?}");
    let final_kb: KnowledgeBase = store::load_kb(&kb_path).unwrap();
    assert_eq!(get(&s, "/api/kb").1["total"], final_kb.len());
}

#[test]
fn cors_allows_configured_origin() {
    let dir = tempfile::tempdir().unwrap();
    let s = start(dir.path(), |cfg| cfg.server.ui_origin = Some("http://localhost:5173".into()));
    let resp = client()
        .get(&s.url("/api/kb"))
        .header("Origin", "http://localhost:5173")
        .call()
        .unwrap();
    assert_eq!(
        resp.headers().get("access-control-allow-origin").unwrap(),
        "http://localhost:5173"
    );
}

#[test]
fn serves_static_ui() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("ui")).unwrap();
    std::fs::write(dir.path().join("ui/index.html"), "<p>ui</p>").unwrap();
    let cfg = CacConfig::default();
    let app = server::router(Arc::new(AppState::new(cfg)), Some(&dir.path().join("ui")));
    let s = server::spawn(app, SocketAddr::from(([127, 0, 0, 1], 0))).unwrap();
    assert_eq!(get_raw(&s, "/ui/index.html"), "<p>ui</p>");
}
