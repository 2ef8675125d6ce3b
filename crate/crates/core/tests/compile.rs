use cac_core::agent::{run_attempt, AgentConfig};
use cac_core::backend::{RecordingBackend, ReplayBackend};
use cac_core::embedder::{Embedder, ReferenceEmbedder};
use cac_core::fixtures::{self, ScriptedCorpus};
use cac_core::kb::{DmDraft, DmKind, KnowledgeBase};
use cac_core::store;
use cac_core::teacher::{
    compile_corpus, compile_problem, CompileConfig, CompileOutcome, CorpusCompilation, FixedClock, ReplayTeacher,
    ScriptedTeacher, ScriptedTeacherTable, ScriptedTurn, TeacherBackend, TeacherReply, ToolCall,
};
use proptest::prelude::*;

fn compile(c: &ScriptedCorpus, teacher: &dyn TeacherBackend, cfg: &CompileConfig) -> (CorpusCompilation, KnowledgeBase) {
    let e = ReferenceEmbedder::default();
    let mut kb = KnowledgeBase::new(e.config().clone());
    let out = compile_corpus(
        &c.problems,
        &mut kb,
        &c.agent_backend(),
        teacher,
        &e,
        &AgentConfig::default(),
        cfg,
        &FixedClock(1),
        &mut |_, _| {},
    )
    .unwrap();
    (out, kb)
}

fn submit_count(exchanges: &[cac_core::teacher::ToolExchange]) -> usize {
    exchanges
        .iter()
        .filter(|x| matches!(x.reply, TeacherReply::Call { call: ToolCall::SubmitDms { .. } }))
        .count()
}

#[test]
fn compiled_problems_are_verified_at_their_end_revision() {
    let c = fixtures::scripted_corpus(&[2, 0, 3, 1]);
    let (out, kb) = compile(&c, &c.teacher(), &CompileConfig::default());
    let e = ReferenceEmbedder::default();
    let cfg = AgentConfig::default();
    for (log, problem) in out.logs.iter().zip(&c.problems) {
        assert_eq!(log.final_outcome, CompileOutcome::Compiled);
        let last = &log.iterations.last().unwrap().attempt;
        assert!(last.is_correct());
        let view = kb.at_revision(log.kb_revision_end).unwrap();
        let inner = c.agent_backend();
        let rec = RecordingBackend::new(&inner);
        let fresh = run_attempt(problem, &view.view(), &rec, &e, &cfg).unwrap();
        assert!(fresh.is_correct());
        assert_eq!(store::trace_to_string(&fresh), store::trace_to_string(last));
        let replay = ReplayBackend::new(rec.take_transcript());
        let again = run_attempt(problem, &view.view(), &replay, &e, &cfg).unwrap();
        assert_eq!(again, fresh);
    }
}

#[test]
fn every_teacher_turn_ends_with_its_only_submission() {
    let c = fixtures::scripted_corpus(&[3, 1, 2]);
    let (out, _) = compile(&c, &c.teacher(), &CompileConfig::default());
    let mut turns = 0;
    for log in &out.logs {
        for it in &log.iterations {
            let Some(t) = &it.teacher else { continue };
            turns += 1;
            assert!(!it.empty_submission);
            assert_eq!(submit_count(&t.exchanges), 1);
            assert!(matches!(
                t.exchanges.last().unwrap().reply,
                TeacherReply::Call { call: ToolCall::SubmitDms { .. } }
            ));
        }
    }
    assert_eq!(turns, 6);
}

#[test]
fn a_second_submission_is_never_executed() {
    let c = fixtures::scripted_corpus(&[1]);
    let mut table = c.teacher_table.clone();
    let key = match &table.turns[0].calls[2] {
        ToolCall::SubmitDms { drafts } => drafts.clone(),
        other => panic!("{other:?}"),
    };
    let extra = DmDraft::new(DmKind::Fact, "Never appended.", "Solve the problem.", "Never appended.");
    table.turns[0].calls = vec![ToolCall::SubmitDms { drafts: key }, ToolCall::SubmitDms { drafts: vec![extra] }];
    let (out, kb) = compile(&c, &ScriptedTeacher::new(table), &CompileConfig::default());
    let it = &out.logs[0].iterations[0];
    assert_eq!(it.teacher.as_ref().unwrap().exchanges.len(), 1);
    assert_eq!(kb.len(), 1);
    assert_eq!(out.logs[0].final_outcome, CompileOutcome::Compiled);
}

#[test]
fn no_submission_within_the_cap_is_an_empty_submission() {
    let c = fixtures::scripted_corpus(&[0]);
    let mut problems = c.problems.clone();
    let table = ScriptedTeacherTable {
        turns: vec![ScriptedTurn {
            problem: "q0".into(),
            iteration: 1,
            calls: vec![ToolCall::Similarity { text_a: "a".into(), text_b: "b".into() }],
        }],
    };
    // Force a failing first attempt by asking for a different correct letter.
    problems[0].correct_letter = "A".into();
    let e = ReferenceEmbedder::default();
    let mut kb = KnowledgeBase::new(e.config().clone());
    let cfg = CompileConfig { max_iterations: 2, tool_call_cap: 4, ..Default::default() };
    let log = compile_problem(
        &problems[0],
        &mut kb,
        &c.agent_backend(),
        &ScriptedTeacher::new(table),
        &e,
        &AgentConfig::default(),
        &cfg,
        &FixedClock(0),
    )
    .unwrap();
    assert_eq!(log.final_outcome, CompileOutcome::IterationCapReached);
    let first = &log.iterations[0];
    assert!(first.empty_submission);
    let t = first.teacher.as_ref().unwrap();
    assert_eq!(t.exchanges.len(), 4);
    assert_eq!(submit_count(&t.exchanges), 0);
    assert!(first.appended_ids.is_empty());
    assert_eq!(kb.len(), 0);
    assert_eq!(log.iterations.len(), 2);
    assert!(log.iterations[1].teacher.is_none());
}

#[test]
fn compilation_is_deterministic_and_replayable() {
    let c = fixtures::scripted_corpus(&[1, 2, 0, 2]);
    let cfg = CompileConfig::default();
    let (a, kb_a) = compile(&c, &c.teacher(), &cfg);
    let (b, kb_b) = compile(&c, &c.teacher(), &cfg);
    assert_eq!(store::compile_logs_to_string(&a.logs), store::compile_logs_to_string(&b.logs));
    assert_eq!(store::kb_to_string(&kb_a), store::kb_to_string(&kb_b));
    let (r, kb_r) = compile(&c, &ReplayTeacher::from_logs(&a.logs), &cfg);
    assert_eq!(r.logs, a.logs);
    assert_eq!(kb_r, kb_a);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn iterations_track_teacher_turns_and_kb_only_grows(turns in proptest::collection::vec(0usize..5, 1..6)) {
        let c = fixtures::scripted_corpus(&turns);
        let e = ReferenceEmbedder::default();
        let mut kb = KnowledgeBase::new(e.config().clone());
        let mut sizes = vec![0usize];
        let out = compile_corpus(
            &c.problems,
            &mut kb,
            &c.agent_backend(),
            &c.teacher(),
            &e,
            &AgentConfig::default(),
            &CompileConfig::default(),
            &FixedClock(0),
            &mut |_, kb| sizes.push(kb.len()),
        )
        .unwrap();
        for (log, &n) in out.logs.iter().zip(&turns) {
            prop_assert_eq!(log.iterations.len(), n + 1);
            prop_assert_eq!(log.final_outcome, CompileOutcome::Compiled);
            prop_assert_eq!(log.appended_count(), n);
            prop_assert!(log.kb_revision_end >= log.kb_revision_start);
        }
        prop_assert!(sizes.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(kb.len(), turns.iter().sum::<usize>());
        // Earlier DMs are never rewritten by later problems.
        for log in &out.logs {
            let snapshot = kb.at_revision(log.kb_revision_end).unwrap();
            for dm in snapshot.dms() {
                prop_assert_eq!(Some(dm), kb.get(&dm.id));
            }
        }
    }
}
