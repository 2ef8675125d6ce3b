use cac_core::agent::{run_attempt, AgentConfig, Outcome};
use cac_core::backend::{ActionTag, RecordingBackend, ReplayBackend};
use cac_core::embedder::{Embedder, ReferenceEmbedder};
use cac_core::fixtures::{self, FIBER_DISTRIBUTION, FIBER_SUBGOAL};
use cac_core::kb::RetrievalQuery;
use cac_core::store;

#[test]
fn trace_matches_the_worked_example() {
    let (kb, e) = fixtures::fiber_kb();
    let cfg = AgentConfig::default();
    let r = run_attempt(&fixtures::fiber_problem(), &kb.view(), &fixtures::fiber_backend(), &e, &cfg).unwrap();
    let tags: Vec<ActionTag> = r.history.iter().map(|s| s.chosen_tag).collect();
    assert_eq!(tags, [ActionTag::G, ActionTag::R, ActionTag::A, ActionTag::A]);
    let depth: Vec<usize> = r.history.iter().map(|s| s.state_after.goal_stack.len()).collect();
    assert_eq!(depth, [2, 2, 1, 1]);
    assert_eq!(r.history[0].state_after.goal_stack[1], FIBER_SUBGOAL);
    for (letter, p) in FIBER_DISTRIBUTION {
        assert!((r.option_distribution[letter] - p).abs() <= 1e-3, "{letter}");
    }
    let total: f64 = r.option_distribution.values().sum();
    assert!((total - 1.0).abs() < 1e-12);
    assert_eq!(r.predicted_letter.as_deref(), Some("B"));
    assert_eq!(r.outcome, Outcome::Correct);
    assert!(r.final_answer_text.is_some());
}

#[test]
fn each_step_retrieves_the_expected_dm() {
    let (kb, e) = fixtures::fiber_kb();
    let r = run_attempt(
        &fixtures::fiber_problem(),
        &kb.view(),
        &fixtures::fiber_backend(),
        &e,
        &AgentConfig::default(),
    )
    .unwrap();
    let ids: Vec<_> = r.history.iter().map(|s| s.retrieved.as_ref().unwrap().id.clone()).collect();
    let expected: Vec<_> = kb.dms().iter().map(|d| d.id.clone()).collect();
    assert_eq!(ids, expected);
    let scores: Vec<f64> = r.history.iter().map(|s| s.retrieved.as_ref().unwrap().score).collect();
    for (got, want) in scores.iter().zip([0.5, 0.5, 0.926, 0.983]) {
        assert!((got - want).abs() < 5e-4, "{scores:?}");
    }
}

#[test]
fn first_step_tie_goes_to_the_earlier_dm() {
    let (kb, e) = fixtures::fiber_kb();
    let q = RetrievalQuery::new(AgentConfig::default().g0, "").unwrap();
    let hits = kb.view().retrieve(&q, 4, &e, Default::default()).unwrap();
    assert_eq!(hits[0].score, hits[1].score);
    assert_eq!(hits[0].id, kb.dms()[0].id);
    assert_eq!(hits[1].id, kb.dms()[3].id);
}

#[test]
fn recorded_attempt_replays_identically() {
    let (kb, e) = fixtures::fiber_kb();
    let cfg = AgentConfig::default();
    let problem = fixtures::fiber_problem();
    let inner = fixtures::fiber_backend();
    let rec = RecordingBackend::new(&inner);
    let original = run_attempt(&problem, &kb.view(), &rec, &e, &cfg).unwrap();
    let transcript = store::transcript_from_str(&store::transcript_to_string(&rec.take_transcript())).unwrap();
    let replay = ReplayBackend::new(transcript);
    let again = run_attempt(&problem, &kb.view(), &replay, &e, &cfg).unwrap();
    assert_eq!(replay.remaining(), 0);
    assert_eq!(store::trace_to_string(&again), store::trace_to_string(&original));
}

#[test]
fn golden_bucket_indices() {
    let e = ReferenceEmbedder::default();
    for (word, bucket) in [("glycogen", 99), ("starch", 186), ("sucrose", 13)] {
        let v = e.embed(word).unwrap();
        let nonzero: Vec<usize> = (0..v.dimension()).filter(|&i| v.values()[i] != 0.0).collect();
        assert_eq!(nonzero, [bucket], "{word}");
    }
}
