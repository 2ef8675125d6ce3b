use cac_wasm::{example_json, fan_curve_json, retrieve_json, run_json};
use serde_json::Value;

fn parse(s: Result<String, String>) -> Value {
    serde_json::from_str(&s.unwrap()).unwrap()
}

#[test]
fn example_lists_four_dms_without_keys() {
    let v = parse(example_json());
    let dms = v["dms"].as_array().unwrap();
    assert_eq!(dms.len(), 4);
    assert!(dms.iter().all(|d| d.get("key_goal").is_none()));
    assert_eq!(v["problem"]["correct_letter"], "B");
}

#[test]
fn retrieval_matches_the_first_agent_step() {
    let initial = parse(example_json())["initial_goal"].as_str().unwrap().to_owned();
    let v = parse(retrieve_json(&initial, "", 4, ""));
    let items = v["items"].as_array().unwrap();
    assert_eq!(items.len(), 4);
    assert_eq!(items[0]["id"], "dm-000000-937e7e9d");
    assert_eq!(items[1]["id"], "dm-000003-9f8da0a8");
    assert_eq!(items[0]["score"], items[1]["score"]);
    let removed = r#"["dm-000000-937e7e9d"]"#;
    let v = parse(retrieve_json(&initial, "", 4, removed));
    assert_eq!(v["items"][0]["id"], "dm-000003-9f8da0a8");
    assert_eq!(v["items"].as_array().unwrap().len(), 3);
}

#[test]
fn bad_inputs_are_errors() {
    assert!(retrieve_json("goal", "", 0, "").is_err());
    assert!(retrieve_json("goal", "", 3, "not json").is_err());
    assert!(retrieve_json("goal", "", 3, r#"["dm-nope"]"#).is_err());
    assert!(fan_curve_json(10, 0, false).is_err());
    assert!(fan_curve_json(1_000_000, 10, false).is_err());
    assert!(run_json(r#"["dm-nope"]"#).is_err());
}

#[test]
fn fan_curve_crosses_over_and_zero_overlap_does_not() {
    let v = parse(fan_curve_json(500, 1, false));
    assert_eq!(v["crossover"], 6);
    let last = v["rows"].as_array().unwrap().last().unwrap().clone();
    assert_eq!(last["distractors"], 500);
    assert_eq!(last["target_rank"], 67);
    let v = parse(fan_curve_json(200, 10, true));
    assert!(v["crossover"].is_null());
    assert!(v["rows"].as_array().unwrap().iter().all(|r| r["target_rank"] == 1));
}

#[test]
fn run_without_ablation_and_with_the_key_dm_removed() {
    let v = parse(run_json(""));
    assert_eq!(v["base"]["outcome"], "correct");
    let tags: Vec<&str> = v["base"]["steps"].as_array().unwrap().iter().map(|s| s["tag"].as_str().unwrap()).collect();
    assert_eq!(tags, ["G", "R", "A", "A"]);
    assert_eq!(v["report"]["verdict"], "prior_knowledge_suspect");

    let v = parse(run_json(r#"["dm-000002-5a718e8c"]"#));
    assert_eq!(v["report"]["verdict"], "knowledge_dependent");
    assert_eq!(v["report"]["divergence_index"], 2);
    assert_eq!(v["ablated"]["outcome"], "step_limit");
}
