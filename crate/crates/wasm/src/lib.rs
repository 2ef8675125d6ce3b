//! Browser bindings over the worked four-DM example. Every export takes and
//! returns JSON strings; the `*_json` functions hold the logic so they can be
//! tested natively.

use std::collections::BTreeSet;

use cac_core::agent::{AgentConfig, AttemptResult};
use cac_core::eval::{ablate_and_rerun, fan_effect_probe, FanProbeConfig};
use cac_core::fixtures;
use cac_core::kb::{DmId, RetrievalQuery, ScoreWeights};
use serde::Serialize;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Largest distractor count the page may request.
pub const MAX_DISTRACTORS: usize = 2000;

fn parse_removed(removed: &str) -> Result<BTreeSet<DmId>, String> {
    if removed.trim().is_empty() {
        return Ok(BTreeSet::new());
    }
    let ids: Vec<String> = serde_json::from_str(removed).map_err(|e| format!("removed ids: {e}"))?;
    Ok(ids.into_iter().map(DmId::new).collect())
}

fn to_json<T: Serialize>(value: &T) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

/// The example problem and its knowledge base, without embedding keys.
pub fn example_json() -> Result<String, String> {
    let (kb, _) = fixtures::fiber_kb();
    let problem = fixtures::fiber_problem();
    let dms: Vec<Value> = kb
        .dms()
        .iter()
        .map(|d| {
            json!({
                "id": d.id,
                "kind": d.kind,
                "description": d.description,
                "goal_condition": d.goal_condition,
                "wm_condition": d.wm_condition,
            })
        })
        .collect();
    to_json(&json!({ "problem": problem, "dms": dms, "initial_goal": AgentConfig::default().g0 }))
}

/// Ranks the example DMs (minus `removed`) against a goal and working-memory text.
pub fn retrieve_json(goal: &str, wm: &str, k: usize, removed: &str) -> Result<String, String> {
    let (kb, e) = fixtures::fiber_kb();
    let removed = parse_removed(removed)?;
    let view = kb.ablation_view(&removed).map_err(|e| e.to_string())?;
    let q = RetrievalQuery::new(goal, wm).map_err(|e| e.to_string())?;
    let hits = view.retrieve(&q, k, &e, ScoreWeights::default()).map_err(|e| e.to_string())?;
    let items: Vec<Value> = hits
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let dm = kb.get(&h.id).expect("hit comes from the knowledge base");
            json!({
                "rank": i + 1,
                "id": h.id,
                "score": h.score,
                "goal_similarity": h.goal_similarity,
                "wm_similarity": h.wm_similarity,
                "description": dm.description,
            })
        })
        .collect();
    to_json(&json!({ "items": items }))
}

/// Target rank as distractors are added.
pub fn fan_curve_json(max_distractors: usize, step: usize, zero_overlap: bool) -> Result<String, String> {
    if step == 0 {
        return Err("step must be positive".into());
    }
    if max_distractors > MAX_DISTRACTORS {
        return Err(format!("at most {MAX_DISTRACTORS} distractors"));
    }
    let mut cfg = FanProbeConfig { max_distractors, step, ..Default::default() };
    if zero_overlap {
        cfg.shared_cues = Some(0);
        cfg.avoid_query_overlap = true;
    }
    let (_, e) = fixtures::fiber_kb();
    let report = fan_effect_probe(&cfg, &e).map_err(|e| e.to_string())?;
    to_json(&report)
}

fn summarize(attempt: &AttemptResult) -> Value {
    let steps: Vec<Value> = attempt
        .history
        .iter()
        .map(|s| {
            json!({
                "index": s.index,
                "tag": s.chosen_tag,
                "retrieved": s.retrieved.as_ref().map(|r| json!({ "id": r.id, "score": r.score })),
                "content": s.content,
                "goal_stack": s.state_after.goal_stack,
                "wm": s.state_after.wm,
            })
        })
        .collect();
    json!({
        "steps": steps,
        "option_distribution": attempt.option_distribution,
        "predicted_letter": attempt.predicted_letter,
        "outcome": attempt.outcome,
    })
}

/// Runs the example with the full knowledge base and with `removed` masked out.
pub fn run_json(removed: &str) -> Result<String, String> {
    let (kb, e) = fixtures::fiber_kb();
    let removed = parse_removed(removed)?;
    let run = ablate_and_rerun(
        &kb,
        &removed,
        &fixtures::fiber_problem(),
        &fixtures::fiber_backend(),
        &e,
        &AgentConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    to_json(&json!({
        "report": run.report,
        "base": summarize(&run.base),
        "ablated": summarize(&run.ablated),
    }))
}

fn js(r: Result<String, String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn example() -> Result<String, JsValue> {
    js(example_json())
}

#[wasm_bindgen]
pub fn retrieve(goal: &str, wm: &str, k: usize, removed: &str) -> Result<String, JsValue> {
    js(retrieve_json(goal, wm, k, removed))
}

#[wasm_bindgen]
pub fn fan_curve(max_distractors: usize, step: usize, zero_overlap: bool) -> Result<String, JsValue> {
    js(fan_curve_json(max_distractors, step, zero_overlap))
}

#[wasm_bindgen]
pub fn run(removed: &str) -> Result<String, JsValue> {
    js(run_json(removed))
}
