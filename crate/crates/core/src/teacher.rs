//! Failure-driven compilation: run the agent, show a failing trace to a
//! teacher, let the teacher probe the knowledge base through three tools, and
//! append what it submits (minus anything that dictates the answer).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{run_attempt, AgentConfig, AgentError, AttemptResult, Problem};
use crate::backend::{BackendError, ModelBackend};
use crate::embedder::{cosine, Embedder};
use crate::eval::{corpus_stats, CompilationStats};
use crate::kb::{
    Author, DmDraft, DmId, KbError, KbView, KnowledgeBase, Provenance, RetrievalQuery, ScoreWeights,
};

#[derive(Debug, Error)]
pub enum CompileError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Kb(#[from] KbError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "tool", rename_all = "snake_case")]
pub enum ToolCall {
    RetrievePreview {
        goal_text: String,
        #[serde(default)]
        wm_text: String,
        #[serde(default = "default_preview_k")]
        k: usize,
    },
    Similarity {
        text_a: String,
        text_b: String,
    },
    SubmitDms {
        #[serde(default)]
        drafts: Vec<DmDraft>,
    },
}

fn default_preview_k() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreviewItem {
    pub rank: usize,
    pub id: DmId,
    pub score: f64,
    pub goal_similarity: f64,
    pub wm_similarity: f64,
    pub description: String,
    pub goal_condition: String,
    pub wm_condition: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum ToolResult {
    Preview { items: Vec<PreviewItem> },
    Similarity { value: f64 },
    Submitted { queued: usize, invalid: Vec<FilteredDm> },
    Error { message: String },
}

/// What the teacher produced on one turn of its tool loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reply", rename_all = "snake_case")]
pub enum TeacherReply {
    Call { call: ToolCall },
    /// Output that could not be parsed as a tool call.
    Malformed { raw: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolExchange {
    pub call_id: String,
    pub reply: TeacherReply,
    pub result: ToolResult,
}

/// Everything the teacher sees when asked for its next tool call.
#[derive(Debug, Clone, Copy)]
pub struct TeacherTurn<'a> {
    pub problem_id: &'a str,
    pub iteration: u32,
    pub prompt: &'a str,
    pub exchanges: &'a [ToolExchange],
}

pub trait TeacherBackend: Send + Sync {
    fn next_call(&self, turn: &TeacherTurn<'_>) -> Result<TeacherReply, BackendError>;
}

impl<T: TeacherBackend + ?Sized> TeacherBackend for Box<T> {
    fn next_call(&self, turn: &TeacherTurn<'_>) -> Result<TeacherReply, BackendError> {
        (**self).next_call(turn)
    }
}

/// Executes one tool call against a read-only view.
pub fn handle_tool_call(
    view: &KbView<'_>,
    call: &ToolCall,
    embedder: &dyn Embedder,
    weights: ScoreWeights,
) -> ToolResult {
    let error = |message: String| ToolResult::Error { message };
    match call {
        ToolCall::RetrievePreview { goal_text, wm_text, k } => {
            let q = match RetrievalQuery::new(goal_text.clone(), wm_text.clone()) {
                Ok(q) => q,
                Err(e) => return error(e.to_string()),
            };
            match view.retrieve(&q, *k, embedder, weights) {
                Ok(hits) => ToolResult::Preview {
                    items: hits
                        .into_iter()
                        .enumerate()
                        .map(|(i, hit)| {
                            let dm = view.get(&hit.id).expect("hit is in view");
                            PreviewItem {
                                rank: i + 1,
                                id: hit.id,
                                score: hit.score,
                                goal_similarity: hit.goal_similarity,
                                wm_similarity: hit.wm_similarity,
                                description: dm.description.clone(),
                                goal_condition: dm.goal_condition.clone(),
                                wm_condition: dm.wm_condition.clone(),
                            }
                        })
                        .collect(),
                },
                Err(e) => error(e.to_string()),
            }
        }
        ToolCall::Similarity { text_a, text_b } => {
            let value = embedder
                .embed(text_a)
                .and_then(|a| embedder.embed(text_b).and_then(|b| cosine(&a, &b)));
            match value {
                Ok(value) => ToolResult::Similarity { value },
                Err(e) => error(e.to_string()),
            }
        }
        ToolCall::SubmitDms { drafts } => {
            let invalid: Vec<FilteredDm> = drafts
                .iter()
                .filter_map(|d| {
                    d.empty_field().map(|field| FilteredDm {
                        draft: d.clone(),
                        reason: RejectReason::Validation {
                            field: field.to_owned(),
                        },
                    })
                })
                .collect();
            ToolResult::Submitted {
                queued: drafts.len() - invalid.len(),
                invalid,
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Cheat filter

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RejectReason {
    /// A field contains the full text of the correct option.
    OptionText,
    /// A field dictates the correct letter.
    AnswerDictation,
    /// A field names the problem id.
    ProblemId,
    Validation { field: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilteredDm {
    pub draft: DmDraft,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheatFilterConfig {
    /// Reject drafts that contain the correct option's text. This also rejects
    /// legitimate facts that name the answer.
    pub option_text: bool,
}

impl Default for CheatFilterConfig {
    fn default() -> Self {
        Self { option_text: true }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterOutcome {
    pub accepted: Vec<DmDraft>,
    pub rejected: Vec<FilteredDm>,
}

/// Lowercases and collapses every run of non-alphanumeric characters to one space.
pub fn normalize_for_filter(text: &str) -> String {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

fn dictation_patterns(letter: &str) -> Vec<Regex> {
    let l = regex::escape(&letter.to_lowercase());
    let sel = "(?:option |choice |letter )?";
    [
        format!(r"\banswers? (?:is |should be |would be |must be |will be |= )?{sel}{l}\b"),
        format!(r"\b{sel}{l} (?:is|would be|must be) (?:the )?(?:correct|right|answer|true)\b"),
        format!(r"\b(?:choose|select|pick|mark|circle) {sel}{l}\b"),
    ]
    .iter()
    .map(|src| Regex::new(src).expect("static pattern"))
    .collect()
}

fn contains_phrase(haystack: &str, needle: &str) -> bool {
    !needle.is_empty() && format!(" {haystack} ").contains(&format!(" {needle} "))
}

/// Splits drafts into accepted and rejected. A draft is rejected when any of
/// its three text fields, normalized, contains the correct option text, an
/// answer-dictation phrase for the correct letter, or the problem id.
pub fn cheat_filter(drafts: &[DmDraft], problem: &Problem, cfg: &CheatFilterConfig) -> FilterOutcome {
    let option = normalize_for_filter(problem.correct_text());
    let pid = normalize_for_filter(&problem.id);
    let patterns = dictation_patterns(&problem.correct_letter);
    let mut out = FilterOutcome::default();
    for d in drafts {
        let fields = [&d.description, &d.goal_condition, &d.wm_condition].map(|f| normalize_for_filter(f));
        let reason = if cfg.option_text && fields.iter().any(|f| contains_phrase(f, &option)) {
            Some(RejectReason::OptionText)
        } else if fields.iter().any(|f| patterns.iter().any(|p| p.is_match(f))) {
            Some(RejectReason::AnswerDictation)
        } else if fields.iter().any(|f| contains_phrase(f, &pid)) {
            Some(RejectReason::ProblemId)
        } else {
            None
        };
        match reason {
            Some(reason) => out.rejected.push(FilteredDm {
                draft: d.clone(),
                reason,
            }),
            None => out.accepted.push(d.clone()),
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Compile loop

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompileConfig {
    pub max_iterations: u32,
    pub tool_call_cap: usize,
    pub preview_k: usize,
    pub prior_summary_window: usize,
    pub cheat_filter: CheatFilterConfig,
}

impl Default for CompileConfig {
    fn default() -> Self {
        Self {
            max_iterations: 150,
            tool_call_cap: 20,
            preview_k: 5,
            prior_summary_window: 3,
            cheat_filter: CheatFilterConfig::default(),
        }
    }
}

/// Source of provenance timestamps (unix seconds).
pub trait Clock {
    fn now(&self) -> u64;
}

#[derive(Debug, Clone, Copy)]
pub struct FixedClock(pub u64);

impl Clock for FixedClock {
    fn now(&self) -> u64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherTranscript {
    pub prompt: String,
    pub exchanges: Vec<ToolExchange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<BackendError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    pub attempt: AttemptResult,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<TeacherTranscript>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub submitted_dms: Vec<DmDraft>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub filtered_dms: Vec<FilteredDm>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub appended_ids: Vec<DmId>,
    /// The teacher never called `submit_dms` within the tool-call cap.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub empty_submission: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompileOutcome {
    Compiled,
    IterationCapReached,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompilationLog {
    pub problem_id: String,
    pub kb_revision_start: u64,
    pub kb_revision_end: u64,
    pub iterations: Vec<IterationRecord>,
    pub final_outcome: CompileOutcome,
}

impl CompilationLog {
    pub fn appended_count(&self) -> usize {
        self.iterations.iter().map(|i| i.appended_ids.len()).sum()
    }
}

pub const TEACHER_MECHANICS: &str = "You are the teacher of a cognitive agent. The agent solves multiple-choice \
problems using only an explicit knowledge base of declarative memories (DMs). Each DM has a description, the goal \
state where it applies and the working-memory state where it applies. At every step the agent embeds its current \
goal and its working memory, retrieves the single DM whose goal and working-memory conditions are most similar \
(score = mean of the two cosine similarities), shows that DM's description to a small model, and the model chooses \
one action: G (set a subgoal), R (update working memory with the retrieved knowledge) or A (answer the current \
goal). Answering the bottom goal ends the attempt and the options are scored. You can only change the agent's \
behaviour by adding DMs. Knowledge that states which option letter to choose, or that names the problem, is \
rejected.";

pub const TEACHER_TOOLS: &str = "TOOLS (reply with exactly one JSON object per message):\n\
{\"tool\":\"retrieve_preview\",\"goal_text\":\"...\",\"wm_text\":\"...\",\"k\":5} - top-k DMs for a hypothetical state\n\
{\"tool\":\"similarity\",\"text_a\":\"...\",\"text_b\":\"...\"} - embedding similarity of two sentences\n\
{\"tool\":\"submit_dms\",\"drafts\":[{\"kind\":\"fact\"|\"policy_cue\",\"description\":\"...\",\"goal_condition\":\"...\",\"wm_condition\":\"...\"}]} - append DMs and end your turn";

/// Renders the teacher prompt for one failed attempt.
pub fn render_teacher_prompt(
    problem: &Problem,
    view: &KbView<'_>,
    attempt: &AttemptResult,
    prior: &[IterationRecord],
    window: usize,
) -> String {
    let mut p = String::new();
    let _ = writeln!(p, "{TEACHER_MECHANICS}\n\n{TEACHER_TOOLS}\n");
    let _ = writeln!(p, "PROBLEM {}: {}", problem.id, problem.stem);
    for (letter, text) in &problem.options {
        let _ = writeln!(p, "{letter}. {text}");
    }
    let _ = writeln!(p, "CORRECT OPTION: {}\n", problem.correct_letter);
    let _ = writeln!(p, "KNOWLEDGE BASE ({} DMs):", view.len());
    for dm in view.iter() {
        let _ = writeln!(
            p,
            "[{}] ({}) goal: {} | wm: {} | {}",
            dm.id, dm.kind, dm.goal_condition, dm.wm_condition, dm.description
        );
    }
    let _ = writeln!(
        p,
        "\nFAILED TRACE (outcome {:?}, predicted {}):",
        attempt.outcome,
        attempt.predicted_letter.as_deref().unwrap_or("none")
    );
    for step in &attempt.history {
        let retrieved = step
            .retrieved
            .as_ref()
            .map(|r| format!("[{}] {:.3} {}", r.id, r.score, r.description))
            .unwrap_or_else(|| "none".into());
        let _ = writeln!(
            p,
            "step {}: goals {:?} wm {:?}\n  retrieved: {}\n  action {}: {}",
            step.index, step.state_before.goal_stack, step.state_before.wm, retrieved, step.chosen_tag, step.content
        );
    }
    if !attempt.option_distribution.is_empty() {
        let dist: Vec<String> = attempt
            .option_distribution
            .iter()
            .map(|(l, v)| format!("p({l})={v:.3}"))
            .collect();
        let _ = writeln!(p, "final scoring: {}", dist.join(", "));
    }
    if let Some(d) = &attempt.diagnostic {
        let _ = writeln!(p, "diagnostic: {d}");
    }
    let recent: Vec<&IterationRecord> = prior.iter().filter(|r| r.teacher.is_some()).collect();
    let recent = &recent[recent.len().saturating_sub(window)..];
    if !recent.is_empty() {
        p.push_str("\nPRIOR SUBMISSIONS:\n");
        for r in recent {
            let _ = writeln!(
                p,
                "iteration {}: {} submitted, {} appended, {} rejected",
                r.iteration,
                r.submitted_dms.len(),
                r.appended_ids.len(),
                r.filtered_dms.len()
            );
            for d in &r.submitted_dms {
                let _ = writeln!(p, "  - {}", d.description);
            }
        }
    }
    if let Some(last) = prior.last() {
        if !last.submitted_dms.is_empty() && last.appended_ids.is_empty() {
            p.push_str("\nYOUR LAST SUBMISSION WAS ENTIRELY REJECTED:\n");
            for f in &last.filtered_dms {
                let _ = writeln!(p, "  - {:?}: {}", f.reason, f.draft.description);
            }
        }
    }
    p
}

struct TurnOutcome {
    transcript: TeacherTranscript,
    submitted: Option<Vec<DmDraft>>,
}

#[allow(clippy::too_many_arguments)]
fn teacher_turn(
    problem: &Problem,
    iteration: u32,
    prompt: String,
    view: &KbView<'_>,
    teacher: &dyn TeacherBackend,
    embedder: &dyn Embedder,
    weights: ScoreWeights,
    cfg: &CompileConfig,
) -> TurnOutcome {
    let mut exchanges: Vec<ToolExchange> = Vec::new();
    let mut failure = None;
    let mut submitted = None;
    while exchanges.len() < cfg.tool_call_cap {
        let turn = TeacherTurn {
            problem_id: &problem.id,
            iteration,
            prompt: &prompt,
            exchanges: &exchanges,
        };
        let reply = match teacher.next_call(&turn) {
            Ok(r) => r,
            Err(e) => {
                failure = Some(e);
                break;
            }
        };
        let call_id = format!("call-{iteration}-{}", exchanges.len() + 1);
        let result = match &reply {
            TeacherReply::Call { call } => handle_tool_call(view, call, embedder, weights),
            TeacherReply::Malformed { raw } => ToolResult::Error {
                message: format!("could not parse a tool call from: {raw}"),
            },
        };
        let done = match &reply {
            TeacherReply::Call {
                call: ToolCall::SubmitDms { drafts },
            } => {
                submitted = Some(drafts.clone());
                true
            }
            _ => false,
        };
        exchanges.push(ToolExchange { call_id, reply, result });
        if done {
            break;
        }
    }
    TurnOutcome {
        transcript: TeacherTranscript {
            prompt,
            exchanges,
            failure,
        },
        submitted,
    }
}

/// Compiles one problem into the knowledge base.
#[allow(clippy::too_many_arguments)]
pub fn compile_problem(
    problem: &Problem,
    kb: &mut KnowledgeBase,
    agent_backend: &dyn ModelBackend,
    teacher: &dyn TeacherBackend,
    embedder: &dyn Embedder,
    agent_cfg: &AgentConfig,
    cfg: &CompileConfig,
    clock: &dyn Clock,
) -> Result<CompilationLog, CompileError> {
    let kb_revision_start = kb.revision();
    let mut iterations: Vec<IterationRecord> = Vec::new();
    let max = cfg.max_iterations.max(1);
    let mut outcome = CompileOutcome::IterationCapReached;
    for iteration in 1..=max {
        let attempt = run_attempt(problem, &kb.view(), agent_backend, embedder, agent_cfg)?;
        let solved = attempt.is_correct();
        let mut record = IterationRecord {
            iteration,
            attempt,
            teacher: None,
            submitted_dms: Vec::new(),
            filtered_dms: Vec::new(),
            appended_ids: Vec::new(),
            empty_submission: false,
        };
        if solved {
            iterations.push(record);
            outcome = CompileOutcome::Compiled;
            break;
        }
        if iteration == max {
            iterations.push(record);
            break;
        }
        let view = kb.view();
        let prompt = render_teacher_prompt(problem, &view, &record.attempt, &iterations, cfg.prior_summary_window);
        let turn = teacher_turn(problem, iteration, prompt, &view, teacher, embedder, agent_cfg.weights, cfg);
        record.teacher = Some(turn.transcript);
        match turn.submitted {
            None => record.empty_submission = true,
            Some(drafts) => {
                let (valid, mut invalid): (Vec<DmDraft>, Vec<FilteredDm>) = {
                    let mut valid = Vec::new();
                    let mut invalid = Vec::new();
                    for d in &drafts {
                        match d.empty_field() {
                            Some(field) => invalid.push(FilteredDm {
                                draft: d.clone(),
                                reason: RejectReason::Validation { field: field.to_owned() },
                            }),
                            None => valid.push(d.clone()),
                        }
                    }
                    (valid, invalid)
                };
                let filtered = cheat_filter(&valid, problem, &cfg.cheat_filter);
                invalid.extend(filtered.rejected);
                let provenance = Provenance {
                    author: Author::Teacher,
                    problem_id: Some(problem.id.clone()),
                    compile_iteration: Some(iteration),
                    created_at: clock.now(),
                };
                record.appended_ids = kb.append_dms(&filtered.accepted, &provenance, embedder)?;
                record.submitted_dms = drafts;
                record.filtered_dms = invalid;
            }
        }
        iterations.push(record);
    }
    Ok(CompilationLog {
        problem_id: problem.id.clone(),
        kb_revision_start,
        kb_revision_end: kb.revision(),
        iterations,
        final_outcome: outcome,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusCompilation {
    pub logs: Vec<CompilationLog>,
    pub stats: CompilationStats,
}

/// Compiles problems in order into one knowledge base. `on_problem` runs after
/// each problem with its log and the updated knowledge base; per-problem
/// failures are recorded in the logs and never abort the corpus.
#[allow(clippy::too_many_arguments)]
pub fn compile_corpus(
    problems: &[Problem],
    kb: &mut KnowledgeBase,
    agent_backend: &dyn ModelBackend,
    teacher: &dyn TeacherBackend,
    embedder: &dyn Embedder,
    agent_cfg: &AgentConfig,
    cfg: &CompileConfig,
    clock: &dyn Clock,
    on_problem: &mut dyn FnMut(&CompilationLog, &KnowledgeBase),
) -> Result<CorpusCompilation, CompileError> {
    let seed_size = kb.len();
    let mut logs = Vec::with_capacity(problems.len());
    for problem in problems {
        let log = compile_problem(problem, kb, agent_backend, teacher, embedder, agent_cfg, cfg, clock)?;
        on_problem(&log, kb);
        logs.push(log);
    }
    let stats = corpus_stats(&logs, seed_size);
    Ok(CorpusCompilation { logs, stats })
}

// ---------------------------------------------------------------------------
// Scripted teacher

/// Calls for one (problem, iteration) teacher turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedTurn {
    pub problem: String,
    pub iteration: u32,
    pub calls: Vec<ToolCall>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptedTeacherTable {
    #[serde(default)]
    pub turns: Vec<ScriptedTurn>,
}

/// Replays scripted calls per (problem, iteration). With no script for a turn
/// it submits nothing; once a script runs out it repeats its last call.
#[derive(Debug, Clone, Default)]
pub struct ScriptedTeacher {
    table: ScriptedTeacherTable,
}

impl ScriptedTeacher {
    pub fn new(table: ScriptedTeacherTable) -> Self {
        Self { table }
    }

    pub fn from_toml(text: &str) -> Result<Self, BackendError> {
        toml::from_str(text)
            .map(Self::new)
            .map_err(|e| BackendError::config(format!("scripted teacher: {e}")))
    }

    pub fn table(&self) -> &ScriptedTeacherTable {
        &self.table
    }
}

impl TeacherBackend for ScriptedTeacher {
    fn next_call(&self, turn: &TeacherTurn<'_>) -> Result<TeacherReply, BackendError> {
        let script = self
            .table
            .turns
            .iter()
            .find(|t| t.problem == turn.problem_id && t.iteration == turn.iteration);
        let call = match script {
            Some(s) if !s.calls.is_empty() => s.calls[turn.exchanges.len().min(s.calls.len() - 1)].clone(),
            _ => ToolCall::SubmitDms { drafts: Vec::new() },
        };
        Ok(TeacherReply::Call { call })
    }
}

/// Answers teacher turns from the transcripts in compilation logs, for
/// offline reproduction of a compile run.
#[derive(Debug, Default)]
pub struct ReplayTeacher {
    turns: BTreeMap<(String, u32), TeacherTranscript>,
}

impl ReplayTeacher {
    pub fn from_logs(logs: &[CompilationLog]) -> Self {
        let mut turns = BTreeMap::new();
        for log in logs {
            for it in &log.iterations {
                if let Some(t) = &it.teacher {
                    turns.insert((log.problem_id.clone(), it.iteration), t.clone());
                }
            }
        }
        Self { turns }
    }
}

impl TeacherBackend for ReplayTeacher {
    fn next_call(&self, turn: &TeacherTurn<'_>) -> Result<TeacherReply, BackendError> {
        let key = (turn.problem_id.to_owned(), turn.iteration);
        let recorded = self.turns.get(&key).ok_or_else(|| BackendError::Replay {
            message: format!("no teacher transcript for {} iteration {}", turn.problem_id, turn.iteration),
        })?;
        if recorded.prompt != turn.prompt {
            return Err(BackendError::Replay {
                message: format!("teacher prompt for {} iteration {} differs", turn.problem_id, turn.iteration),
            });
        }
        match recorded.exchanges.get(turn.exchanges.len()) {
            Some(x) => Ok(x.reply.clone()),
            None => Err(recorded.failure.clone().unwrap_or(BackendError::Replay {
                message: "teacher transcript exhausted".into(),
            })),
        }
    }
}

/// Ids of DMs that did not exist before the compile and were submitted for `problem`.
pub fn appended_ids(log: &CompilationLog) -> BTreeSet<DmId> {
    log.iterations
        .iter()
        .flat_map(|i| i.appended_ids.iter().cloned())
        .collect()
}
