//! Post-compilation analysis: an exhaustive retrieval oracle, knowledge
//! ablation, fan-effect probes and corpus statistics.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{run_attempt, AgentConfig, AgentError, AttemptResult, Outcome, Problem};
use crate::backend::ModelBackend;
use crate::embedder::{EmbedError, Embedder};
use crate::kb::{
    DmDraft, DmId, DmKind, KbError, KbView, KnowledgeBase, Provenance, RetrievalQuery, ScoreWeights,
};
use crate::teacher::{CompilationLog, CompileOutcome};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("invalid probe configuration: {0}")]
    Probe(String),
}

// ---------------------------------------------------------------------------
// Retrieval oracle

/// Brute-force retrieval that ignores cached keys: every condition text is
/// re-embedded, every score recomputed, and the full list stably sorted.
pub struct RetrievalOracle {
    entries: Vec<(DmId, u64, Vec<f64>, Vec<f64>)>,
    weights: ScoreWeights,
}

fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
    }
    let mut aa = 0.0;
    for x in a {
        aa += x * x;
    }
    let mut bb = 0.0;
    for y in b {
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        (dot / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0)
    }
}

impl RetrievalOracle {
    pub fn new(view: &KbView<'_>, embedder: &dyn Embedder, weights: ScoreWeights) -> Result<Self, EmbedError> {
        let mut entries = Vec::new();
        for dm in view.iter() {
            let g = embedder.embed(&dm.goal_condition)?.values().to_vec();
            let w = embedder.embed(&dm.wm_condition)?.values().to_vec();
            entries.push((dm.id.clone(), dm.seq, g, w));
        }
        Ok(Self { entries, weights })
    }

    pub fn query(&self, q: &RetrievalQuery, k: usize, embedder: &dyn Embedder) -> Result<Vec<(DmId, f64)>, EmbedError> {
        let qg = embedder.embed(&q.goal_text)?;
        let qw = embedder.embed(&q.wm_text)?;
        let mut all: Vec<(DmId, u64, f64)> = self
            .entries
            .iter()
            .map(|(id, seq, g, w)| {
                let score = self.weights.goal * oracle_cosine(qg.values(), g)
                    + self.weights.wm * oracle_cosine(qw.values(), w);
                (id.clone(), *seq, score)
            })
            .collect();
        // Stable sort on score alone keeps insertion (= sequence) order among ties.
        all.sort_by_key(|e| e.1);
        all.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(std::cmp::Ordering::Equal));
        Ok(all.into_iter().take(k).map(|(id, _, s)| (id, s)).collect())
    }
}

pub fn retrieval_oracle(
    view: &KbView<'_>,
    q: &RetrievalQuery,
    k: usize,
    embedder: &dyn Embedder,
    weights: ScoreWeights,
) -> Result<Vec<(DmId, f64)>, EmbedError> {
    RetrievalOracle::new(view, embedder, weights)?.query(q, k, embedder)
}

// ---------------------------------------------------------------------------
// Ablation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// Correct with the knowledge, incorrect without it.
    KnowledgeDependent,
    /// Still correct without the knowledge: the model may be answering from
    /// its own prior knowledge.
    PriorKnowledgeSuspect,
    /// The base attempt was already incorrect.
    Inconclusive,
}

pub fn verdict(base: Outcome, ablated: Outcome) -> Verdict {
    match (base, ablated) {
        (Outcome::Correct, Outcome::Correct) => Verdict::PriorKnowledgeSuspect,
        (Outcome::Correct, _) => Verdict::KnowledgeDependent,
        _ => Verdict::Inconclusive,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRefs {
    pub base: String,
    pub ablated: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub problem_id: String,
    pub kb_revision: u64,
    pub removed_ids: Vec<DmId>,
    pub base_outcome: Outcome,
    pub ablated_outcome: Outcome,
    pub verdict: Verdict,
    /// First step where retrieval, action or goal stack differ.
    pub divergence_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_refs: Option<TraceRefs>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub report: AblationReport,
    pub base: AttemptResult,
    pub ablated: AttemptResult,
}

/// Index of the first step at which two traces differ in retrieved DM, chosen
/// action or resulting goal stack; steps are aligned by index.
pub fn divergence_index(base: &AttemptResult, other: &AttemptResult) -> Option<usize> {
    let n = base.history.len().max(other.history.len());
    (0..n).find(|&i| match (base.history.get(i), other.history.get(i)) {
        (Some(a), Some(b)) => {
            a.retrieved.as_ref().map(|r| &r.id) != b.retrieved.as_ref().map(|r| &r.id)
                || a.chosen_tag != b.chosen_tag
                || a.state_after.goal_stack != b.state_after.goal_stack
        }
        _ => true,
    })
}

/// Runs the problem on the full knowledge base and on a view without
/// `removed`, and classifies the pair of outcomes.
pub fn ablate_and_rerun(
    kb: &KnowledgeBase,
    removed: &BTreeSet<DmId>,
    problem: &Problem,
    backend: &dyn ModelBackend,
    embedder: &dyn Embedder,
    cfg: &AgentConfig,
) -> Result<AblationRun, EvalError> {
    let ablated_view = kb.ablation_view(removed)?;
    let base = run_attempt(problem, &kb.view(), backend, embedder, cfg)?;
    let ablated = run_attempt(problem, &ablated_view, backend, embedder, cfg)?;
    let report = AblationReport {
        problem_id: problem.id.clone(),
        kb_revision: kb.revision(),
        removed_ids: removed.iter().cloned().collect(),
        base_outcome: base.outcome,
        ablated_outcome: ablated.outcome,
        verdict: verdict(base.outcome, ablated.outcome),
        divergence_index: divergence_index(&base, &ablated),
        trace_refs: None,
    };
    Ok(AblationRun { report, base, ablated })
}

/// Heuristic candidate set for ablation: every DM retrieved during an attempt.
pub fn top_retrieved_candidates(attempt: &AttemptResult) -> BTreeSet<DmId> {
    attempt.retrieved_ids().into_iter().collect()
}

// ---------------------------------------------------------------------------
// Fan effect

/// Generator for synthetic fan-effect knowledge bases.
///
/// The target DM's conditions are the query texts plus `target_extra_tokens`
/// tokens of its own. Distractor `i` shares the first `shared_cues` tokens of
/// each query field (none, or values at or above a field's token count, mean
/// full overlap) and adds `noise_tokens` tokens unique to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FanProbeConfig {
    pub query_goal: String,
    pub query_wm: String,
    pub target_extra_tokens: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shared_cues: Option<usize>,
    pub noise_tokens: usize,
    pub max_distractors: usize,
    pub step: usize,
    /// Re-draw noise tokens whose embedding overlaps either query field.
    pub avoid_query_overlap: bool,
}

impl Default for FanProbeConfig {
    fn default() -> Self {
        Self {
            query_goal: "Identify the indigestible plant carbohydrate".into(),
            query_wm: "dietary fiber comes from plant cell walls".into(),
            target_extra_tokens: 3,
            shared_cues: None,
            noise_tokens: 3,
            max_distractors: 500,
            step: 10,
            avoid_query_overlap: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FanRow {
    pub distractors: usize,
    pub kb_size: usize,
    /// 1-based.
    pub target_rank: usize,
    pub target_score: f64,
    pub best_other_score: Option<f64>,
    /// Target score minus the best other score; none without competitors.
    pub margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FanReport {
    pub config: FanProbeConfig,
    pub rows: Vec<FanRow>,
    /// Smallest probed distractor count at which the target is not rank 1.
    pub crossover: Option<usize>,
}

impl FanReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("distractors,kb_size,target_rank,target_score,best_other_score,margin\n");
        for r in &self.rows {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.distractors,
                r.kb_size,
                r.target_rank,
                r.target_score,
                opt(r.best_other_score),
                opt(r.margin)
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:>11} {:>7} {:>5} {:>8} {:>9}\n", "distractors", "kb_size", "rank", "target", "margin");
        for r in &self.rows {
            let margin = r.margin.map(|m| format!("{m:+.4}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "{:>11} {:>7} {:>5} {:>8.4} {:>9}",
                r.distractors, r.kb_size, r.target_rank, r.target_score, margin
            );
        }
        match self.crossover {
            Some(n) => {
                let _ = writeln!(out, "target first loses rank 1 at {n} distractors");
            }
            None => out.push_str("target stays at rank 1\n"),
        }
        out
    }
}

fn overlaps(embedder: &dyn Embedder, token: &str, query: &[&crate::embedder::EmbeddingVector]) -> Result<bool, EmbedError> {
    let v = embedder.embed(token)?;
    for q in query {
        if crate::embedder::cosine(&v, q)? != 0.0 {
            return Ok(true);
        }
    }
    Ok(false)
}

fn noise_token(
    embedder: &dyn Embedder,
    base: String,
    avoid: Option<&[&crate::embedder::EmbeddingVector]>,
) -> Result<String, EmbedError> {
    let Some(query) = avoid else {
        return Ok(base);
    };
    for attempt in 0..256 {
        let candidate = if attempt == 0 { base.clone() } else { format!("{base}r{attempt}") };
        if !overlaps(embedder, &candidate, query)? {
            return Ok(candidate);
        }
    }
    Ok(base)
}

/// Distractor drafts `0..count` for a probe configuration.
pub fn fan_distractors(
    cfg: &FanProbeConfig,
    count: usize,
    embedder: &dyn Embedder,
) -> Result<Vec<DmDraft>, EmbedError> {
    let goal_tokens = crate::embedder::tokenize(&cfg.query_goal);
    let wm_tokens = crate::embedder::tokenize(&cfg.query_wm);
    let qg = embedder.embed(&cfg.query_goal)?;
    let qw = embedder.embed(&cfg.query_wm)?;
    let query = [&qg, &qw];
    let avoid = cfg.avoid_query_overlap.then_some(&query[..]);
    let field = |shared: &[String], i: usize, tag: char| -> Result<String, EmbedError> {
        let mut parts: Vec<String> = shared[..cfg.shared_cues.unwrap_or(usize::MAX).min(shared.len())].to_vec();
        for j in 0..cfg.noise_tokens {
            parts.push(noise_token(embedder, format!("n{i}{tag}{j}"), avoid)?);
        }
        Ok(parts.join(" "))
    };
    (0..count)
        .map(|i| {
            let goal = field(&goal_tokens, i, 'g')?;
            let wm = field(&wm_tokens, i, 'w')?;
            let goal = if goal.is_empty() { format!("n{i}g") } else { goal };
            let wm = if wm.is_empty() { format!("n{i}w") } else { wm };
            Ok(DmDraft::new(DmKind::Fact, format!("Distractor {i}"), goal, wm))
        })
        .collect()
}

pub fn fan_target(cfg: &FanProbeConfig) -> DmDraft {
    let extra = |tag: &str| -> String {
        (0..cfg.target_extra_tokens)
            .map(|j| format!(" target{tag}{j}"))
            .collect()
    };
    DmDraft::new(
        DmKind::Fact,
        "Target knowledge",
        format!("{}{}", cfg.query_goal, extra("g")),
        format!("{}{}", cfg.query_wm, extra("w")),
    )
}

/// Ranks the target under its designed query as distractors are added,
/// probing at 0, step, 2*step, ... up to `max_distractors`. Each probed size
/// is one committed revision of a single synthetic knowledge base, so the
/// distractor sets are nested.
pub fn fan_effect_probe(cfg: &FanProbeConfig, embedder: &dyn Embedder) -> Result<FanReport, EvalError> {
    if cfg.step == 0 {
        return Err(EvalError::Probe("step must be positive".into()));
    }
    if cfg.query_goal.trim().is_empty() {
        return Err(EvalError::Probe("query goal is empty".into()));
    }
    let weights = ScoreWeights::default();
    let mut kb = KnowledgeBase::new(embedder.config().clone());
    let provenance = Provenance::human(0);
    let target_ids = kb.append_dms(&[fan_target(cfg)], &provenance, embedder)?;
    let target = &target_ids[0];
    let distractors = fan_distractors(cfg, cfg.max_distractors, embedder)?;
    let q = RetrievalQuery::new(cfg.query_goal.clone(), cfg.query_wm.clone())?;
    let mut rows = Vec::new();
    let mut n = 0;
    loop {
        let view = kb.view();
        let ranked = view.retrieve(&q, view.len(), embedder, weights)?;
        let pos = ranked.iter().position(|r| &r.id == target).expect("target present");
        let target_score = ranked[pos].score;
        let best_other = ranked.iter().find(|r| &r.id != target).map(|r| r.score);
        rows.push(FanRow {
            distractors: n,
            kb_size: view.len(),
            target_rank: pos + 1,
            target_score,
            best_other_score: best_other,
            margin: best_other.map(|b| target_score - b),
        });
        if n >= cfg.max_distractors {
            break;
        }
        let next = (n + cfg.step).min(cfg.max_distractors);
        kb.append_dms(&distractors[n..next], &provenance, embedder)?;
        n = next;
    }
    let crossover = rows.iter().find(|r| r.target_rank > 1).map(|r| r.distractors);
    Ok(FanReport {
        config: cfg.clone(),
        rows,
        crossover,
    })
}

// ---------------------------------------------------------------------------
// Corpus statistics

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CompilationStats {
    pub problems_attempted: usize,
    pub problems_compiled: usize,
    pub total_dms: usize,
    pub iterations_mean: f64,
    /// Population standard deviation.
    pub iterations_sd: f64,
    pub iterations_max: usize,
    /// Knowledge base size after each problem, starting with the seed size.
    pub kb_size_curve: Vec<usize>,
    pub success_rate: f64,
}

/// Figures from a 27-problem biology reference run, shown next to local
/// results for comparison only.
pub const REFERENCE_RUN: (usize, f64, f64, usize) = (27, 3.1, 2.5, 188);

pub fn corpus_stats(logs: &[CompilationLog], seed_size: usize) -> CompilationStats {
    if logs.is_empty() {
        return CompilationStats {
            kb_size_curve: vec![seed_size],
            ..Default::default()
        };
    }
    let iters: Vec<f64> = logs.iter().map(|l| l.iterations.len() as f64).collect();
    let n = iters.len() as f64;
    let mean = iters.iter().sum::<f64>() / n;
    let var = iters.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let mut curve = vec![seed_size];
    let mut size = seed_size;
    for l in logs {
        size += l.appended_count();
        curve.push(size);
    }
    let compiled = logs
        .iter()
        .filter(|l| l.final_outcome == CompileOutcome::Compiled)
        .count();
    CompilationStats {
        problems_attempted: logs.len(),
        problems_compiled: compiled,
        total_dms: size - seed_size,
        iterations_mean: mean,
        iterations_sd: var.sqrt(),
        iterations_max: logs.iter().map(|l| l.iterations.len()).max().unwrap_or(0),
        kb_size_curve: curve,
        success_rate: compiled as f64 / n,
    }
}

impl CompilationStats {
    pub fn to_table(&self) -> String {
        let (rp, rm, rs, rd) = REFERENCE_RUN;
        format!(
            "{:<22} {:>8} {:>8} {:>6} {:>6} {:>5}\n{:<22} {:>8} {:>8} {:>6.2} {:>6.2} {:>5}\n{:<22} {:>8} {:>8} {:>6.2} {:>6.2} {:>5}\n",
            "run", "problems", "compiled", "mean", "sd", "DMs",
            "this run", self.problems_attempted, self.problems_compiled, self.iterations_mean, self.iterations_sd, self.total_dms,
            "reference run", rp, rp, rm, rs, rd,
        )
    }
}
