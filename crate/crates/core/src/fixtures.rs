//! Shipped scripted scenarios.
//!
//! `fiber_*` reproduces the dietary-fiber walkthrough: a four-DM knowledge base
//! and a scripted backend under which the agent sets a subgoal, records a
//! working-memory update, answers the subgoal, then answers the problem.
//! `scripted_corpus` builds synthetic problems whose solution needs a known
//! number of teacher iterations.

use std::collections::BTreeMap;

use crate::agent::Problem;
use crate::backend::{
    ActionTag, RuleMode, ScriptedBackend, ScriptedDefaults, ScriptedRule, ScriptedTable,
};
use crate::embedder::{Embedder, ReferenceEmbedder};
use crate::kb::{DmDraft, DmKind, KnowledgeBase, Provenance};
use crate::teacher::{ScriptedTeacher, ScriptedTeacherTable, ScriptedTurn, ToolCall};

pub const FIBER_SUBGOAL: &str = "Identify which option is indigestible plant-based carbohydrate.";
pub const FIBER_WM_UPDATE: &str = "Cellulose is indigestible plant-based carbohydrate, matching dietary fiber.";
pub const FIBER_SUBGOAL_ANSWER: &str = "Cellulose is indigestible plant-based carbohydrate.";
pub const FIBER_FINAL_ANSWER: &str = "Cellulose is characterized as dietary fiber.";
pub const UNKNOWN_ANSWER: &str = "I cannot determine this from my knowledge.";

/// Final option distribution as reported, to three decimals. Those figures sum
/// to 1.001, so the script uses [`FIBER_SCRIPTED_DISTRIBUTION`], which sums
/// to 1 and rounds to them.
pub const FIBER_DISTRIBUTION: [(&str, f64); 4] = [("A", 0.128), ("B", 0.845), ("C", 0.022), ("D", 0.006)];
pub const FIBER_SCRIPTED_DISTRIBUTION: [(&str, f64); 4] = [("A", 0.1278), ("B", 0.8446), ("C", 0.0220), ("D", 0.0056)];

fn options(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs
        .iter()
        .map(|(k, v)| ((*k).to_owned(), (*v).to_owned()))
        .collect()
}

fn logprobs(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| ((*k).to_owned(), *v)).collect()
}

pub fn fiber_problem() -> Problem {
    Problem {
        id: "fiber-mcq".into(),
        stem: "Which of the following is characterized as dietary fiber?".into(),
        options: options(&[("A", "Glycogen"), ("B", "Cellulose"), ("C", "Sucrose"), ("D", "Starch")]),
        correct_letter: "B".into(),
        kc_tags: vec!["carbohydrates".into()],
    }
}

pub fn fiber_drafts() -> Vec<DmDraft> {
    vec![
        DmDraft::new(
            DmKind::PolicyCue,
            "Policy cue: if solving and WM indicates cellulose is an indigestible plant carbohydrate (dietary fiber), proceed toward resolution.",
            "Solve the problem.",
            "Working memory is empty at the start of solving.",
        ),
        DmDraft::new(
            DmKind::PolicyCue,
            "Policy cue: if the current goal is identify dietary-fiber source and WM mentions cellulose is indigestible, consolidate and move forward.",
            FIBER_SUBGOAL,
            "No relevant facts recorded yet.",
        ),
        DmDraft::new(
            DmKind::Fact,
            "Fact: Cellulose is dietary fiber in plants and is not digestible by humans.",
            "Identify which option is indigestible plant-based carbohydrate (dietary-fiber source).",
            FIBER_WM_UPDATE,
        ),
        DmDraft::new(
            DmKind::PolicyCue,
            "Policy cue: if solving and WM contains cellulose is indigestible, answer the MCQ.",
            "Solve the problem.",
            "Answered identify which option is indigestible plant-based carbohydrate: cellulose is indigestible plant-based carbohydrate.",
        ),
    ]
}

/// The four-DM knowledge base, committed as one human-authored revision.
pub fn fiber_kb() -> (KnowledgeBase, ReferenceEmbedder) {
    let e = ReferenceEmbedder::default();
    let mut kb = KnowledgeBase::new(e.config().clone());
    kb.append_dms(&fiber_drafts(), &Provenance::human(0), &e)
        .expect("fixture drafts are valid");
    (kb, e)
}

pub fn fiber_table() -> ScriptedTable {
    let action = |cue: &str, lp: &[(&str, f64)]| ScriptedRule {
        mode: RuleMode::Action,
        tag: None,
        contains: vec![cue.to_owned()],
        absent: vec![],
        regex: None,
        logprobs: logprobs(lp),
        text: String::new(),
    };
    let generate = |tag: ActionTag, contains: &[&str], text: &str| ScriptedRule {
        mode: RuleMode::Generate,
        tag: Some(tag),
        contains: contains.iter().map(|s| (*s).to_owned()).collect(),
        absent: vec![],
        regex: None,
        logprobs: BTreeMap::new(),
        text: text.to_owned(),
    };
    let final_lp: Vec<(&str, f64)> = FIBER_SCRIPTED_DISTRIBUTION.iter().map(|(l, p)| (*l, p.ln())).collect();
    ScriptedTable {
        defaults: ScriptedDefaults {
            text: UNKNOWN_ANSWER.into(),
            ..Default::default()
        },
        rules: vec![
            action("proceed toward resolution", &[("G", -0.1), ("R", -2.3), ("A", -3.0)]),
            action("consolidate and move forward", &[("G", -2.5), ("R", -0.2), ("A", -2.0)]),
            action("not digestible by humans", &[("G", -3.1), ("R", -1.9), ("A", -0.3)]),
            action("answer the MCQ", &[("G", -2.8), ("R", -2.6), ("A", -0.1)]),
            generate(ActionTag::G, &["proceed toward resolution"], FIBER_SUBGOAL),
            generate(ActionTag::R, &["consolidate and move forward"], FIBER_WM_UPDATE),
            generate(
                ActionTag::A,
                &[
                    "not digestible by humans",
                    "G1: Identify which option is indigestible plant-based carbohydrate. <- CURRENT",
                ],
                FIBER_SUBGOAL_ANSWER,
            ),
            generate(
                ActionTag::A,
                &["answer the MCQ", "G0: Solve the problem. <- CURRENT", FIBER_SUBGOAL_ANSWER],
                FIBER_FINAL_ANSWER,
            ),
            ScriptedRule {
                mode: RuleMode::Options,
                tag: None,
                contains: vec![format!("Answered 'Solve the problem.': {FIBER_FINAL_ANSWER}")],
                absent: vec![],
                regex: None,
                logprobs: logprobs(&final_lp),
                text: String::new(),
            },
        ],
    }
}

pub fn fiber_backend() -> ScriptedBackend {
    ScriptedBackend::new(fiber_table()).expect("fixture table is valid")
}

/// Problems, an agent script and a teacher script for a synthetic corpus.
#[derive(Debug, Clone)]
pub struct ScriptedCorpus {
    pub problems: Vec<Problem>,
    pub agent_table: ScriptedTable,
    pub teacher_table: ScriptedTeacherTable,
}

impl ScriptedCorpus {
    pub fn agent_backend(&self) -> ScriptedBackend {
        ScriptedBackend::new(self.agent_table.clone()).expect("generated table is valid")
    }

    pub fn teacher(&self) -> ScriptedTeacher {
        ScriptedTeacher::new(self.teacher_table.clone())
    }
}

fn corpus_stem(k: usize) -> String {
    format!("Which category does specimen number {k} belong to?")
}

fn corpus_wm(k: usize) -> String {
    format!("The question concerns subject{k} material.")
}

fn key_draft(k: usize) -> DmDraft {
    DmDraft::new(
        DmKind::Fact,
        format!("Key insight {k}: subject{k} material belongs to the third listed category."),
        "Solve the problem.",
        corpus_wm(k),
    )
}

fn decoy_draft(k: usize, i: usize) -> DmDraft {
    DmDraft::new(
        DmKind::PolicyCue,
        format!("Decoy note {k}-{i}: review earlier material before answering."),
        "Recall a related fact.",
        format!("Unrelated decoy memory {k} {i}."),
    )
}

/// A corpus where problem `k` needs exactly `teacher_turns[k]` teacher turns.
///
/// The agent first writes a problem-specific working-memory line, then
/// answers. Its option scoring favours the correct letter only when the
/// problem's key DM was retrieved (or, for problems needing zero turns,
/// always). The teacher submits decoys on its first `n - 1` turns and the key
/// DM on turn `n`, probing the knowledge base with both tools first.
pub fn scripted_corpus(teacher_turns: &[usize]) -> ScriptedCorpus {
    let mut problems = Vec::new();
    let mut rules = vec![ScriptedRule {
        mode: RuleMode::Action,
        tag: None,
        contains: vec!["WORKING MEMORY: (empty)".into()],
        absent: vec![],
        regex: None,
        logprobs: logprobs(&[("G", -5.0), ("R", -0.1), ("A", -4.0)]),
        text: String::new(),
    }];
    let mut turns = Vec::new();
    let correct = logprobs(&[("A", -3.0), ("B", -2.5), ("C", -0.1), ("D", -3.5)]);
    for (k, &needed) in teacher_turns.iter().enumerate() {
        let id = format!("q{k}");
        let stem = corpus_stem(k);
        problems.push(Problem {
            id: id.clone(),
            stem: stem.clone(),
            options: options(&[
                ("A", &format!("Group alpha {k}")),
                ("B", &format!("Group beta {k}")),
                ("C", &format!("Group gamma {k}")),
                ("D", &format!("Group delta {k}")),
            ]),
            correct_letter: "C".into(),
            kc_tags: vec![format!("kc-{k}")],
        });
        rules.push(ScriptedRule {
            mode: RuleMode::Generate,
            tag: Some(ActionTag::R),
            contains: vec![format!("PROBLEM: {stem}")],
            absent: vec![],
            regex: None,
            logprobs: BTreeMap::new(),
            text: corpus_wm(k),
        });
        let mut contains = vec![format!("PROBLEM: {stem}")];
        if needed > 0 {
            contains.push(format!("RETRIEVED KNOWLEDGE: Key insight {k}:"));
        }
        rules.push(ScriptedRule {
            mode: RuleMode::Options,
            tag: None,
            contains,
            absent: vec![],
            regex: None,
            logprobs: correct.clone(),
            text: String::new(),
        });
        for turn in 1..=needed {
            let drafts = if turn == needed {
                vec![key_draft(k)]
            } else {
                vec![decoy_draft(k, turn)]
            };
            turns.push(ScriptedTurn {
                problem: id.clone(),
                iteration: turn as u32,
                calls: vec![
                    ToolCall::RetrievePreview {
                        goal_text: "Solve the problem.".into(),
                        wm_text: corpus_wm(k),
                        k: 5,
                    },
                    ToolCall::Similarity {
                        text_a: corpus_wm(k),
                        text_b: drafts[0].wm_condition.clone(),
                    },
                    ToolCall::SubmitDms { drafts },
                ],
            });
        }
    }
    ScriptedCorpus {
        problems,
        agent_table: ScriptedTable {
            defaults: ScriptedDefaults {
                text: "Answering from the retrieved knowledge.".into(),
                ..Default::default()
            },
            rules,
        },
        teacher_table: ScriptedTeacherTable { turns },
    }
}
