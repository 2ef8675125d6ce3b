mod common;

use cac_core::agent::Outcome;
use cac_core::backend::ActionTag;
use cac_core::fixtures;
use cac_core::store;
use common::{cac, read, write_fiber, MockEndpoint};

#[test]
fn remote_run_replays_offline_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    write_fiber(dir.path());
    let mock = MockEndpoint::start(fixtures::fiber_backend());
    mock.write_profile(&dir.path().join("remote.toml"));
    let out = cac(dir.path(), &["solve", "--kb", "kb.jsonl", "--backend", "remote.toml", "--run-id", "r"]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    let calls = mock.requests();
    assert!(calls > 4);
    let trace = store::load_trace(&dir.path().join("runs/r/traces/fiber-mcq.jsonl")).unwrap();
    assert_eq!(trace.outcome, Outcome::Correct);
    let tags: Vec<ActionTag> = trace.history.iter().map(|s| s.chosen_tag).collect();
    assert_eq!(tags, [ActionTag::G, ActionTag::R, ActionTag::A, ActionTag::A]);
    // Raw request and response bodies are part of the transcript.
    let transcript = read(dir.path().join("runs/r/transcripts/fiber-mcq.jsonl"));
    assert!(transcript.contains("top_logprobs"));

    drop(mock);
    let out = cac(dir.path(), &["replay", "--run", "r"]);
    assert_eq!(out.code, 0, "{}{}", out.stdout, out.stderr);
    assert_eq!(
        read(dir.path().join("runs/r/traces/fiber-mcq.jsonl")),
        read(dir.path().join("runs/r/replay/traces/fiber-mcq.jsonl"))
    );
}

#[test]
fn remote_ablation_replays_offline() {
    let dir = tempfile::tempdir().unwrap();
    write_fiber(dir.path());
    let mock = MockEndpoint::start(fixtures::fiber_backend());
    mock.write_profile(&dir.path().join("remote.toml"));
    let out = cac(
        dir.path(),
        &["ablate", "--kb", "kb.jsonl", "--problem", "fiber-mcq", "--top-retrieved", "--backend", "remote.toml", "--run-id", "a"],
    );
    assert_eq!(out.code, 0, "{}", out.stderr);
    drop(mock);
    assert_eq!(cac(dir.path(), &["replay", "--run", "a"]).code, 0);
}

#[test]
fn unreachable_endpoint_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    write_fiber(dir.path());
    std::fs::write(
        dir.path().join("remote.toml"),
        "kind = \"remote\"\n[remote]\nurl = \"http://127.0.0.1:9/v1/chat/completions\"\nretries = 0\ntimeout_secs = 2\n",
    )
    .unwrap();
    let out = cac(dir.path(), &["solve", "--kb", "kb.jsonl", "--backend", "remote.toml"]);
    assert_eq!(out.code, 2);
    assert!(out.stderr.contains("unavailable"), "{}", out.stderr);
}
