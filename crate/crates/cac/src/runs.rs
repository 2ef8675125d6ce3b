//! Run directories and the operations behind each subcommand.
//!
//! A run directory holds everything needed to reproduce the run offline:
//!
//! ```text
//! <out>/<run_id>/
//!   manifest.json
//!   problems.jsonl          problems the run touched
//!   kb.jsonl                knowledge base as the run saw it (compile: at start)
//!   traces/<stem>.jsonl     one attempt per file
//!   transcripts/<stem>.jsonl  agent backend calls of that attempt (compile: per problem)
//!   embeddings.jsonl        recorded embeddings (remote embedder only)
//!   compile_log.jsonl, stats.json           compile
//!   ablation.json                           ablate
//!   fan.json, fan.csv                       probe
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use cac_core::agent::{run_attempt, AgentConfig, AttemptResult, Outcome, Problem};
use cac_core::backend::{ModelBackend, RecordingBackend, ReplayBackend, TranscriptEntry};
use cac_core::config::CacConfig;
use cac_core::embedder::{Embedder, EmbedderKind, RecordingEmbedder, ReferenceEmbedder, ReplayEmbedder};
use cac_core::eval::{self, AblationReport, AblationRun, CompilationStats, FanProbeConfig, FanReport, TraceRefs};
use cac_core::kb::{DmId, KbView, KnowledgeBase};
use cac_core::store::{self, EmbeddingRecord, KbLock, RunManifest, StoreError};
use cac_core::teacher::{compile_corpus, compile_problem, FixedClock, ReplayTeacher, TeacherBackend};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Domain(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Domain(_) => 1,
            CliError::Usage(_) | CliError::Config(_) => 2,
        }
    }
}

/// Errors reading inputs are configuration errors; everything else that
/// happens during a run is a domain failure.
fn input(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn domain(e: impl std::fmt::Display) -> CliError {
    CliError::Domain(e.to_string())
}

pub fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn default_run_id(mode: &str, started_at: u64) -> String {
    format!("{mode}-{started_at}-{}", std::process::id())
}

#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
    pub id: String,
}

impl RunDir {
    /// Creates `<out>/<id>`; refuses to reuse a directory that already holds
    /// a manifest.
    pub fn create(out: &Path, id: &str) -> Result<Self, CliError> {
        if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
            return Err(CliError::Usage(format!("invalid run id `{id}`")));
        }
        let root = out.join(id);
        if root.join("manifest.json").exists() {
            return Err(CliError::Usage(format!("run directory {} already exists", root.display())));
        }
        std::fs::create_dir_all(&root).map_err(|e| domain(format!("{}: {e}", root.display())))?;
        Ok(Self {
            root,
            id: id.to_owned(),
        })
    }

    /// A run given by path, or by id under `out`.
    pub fn locate(out: &Path, run: &str) -> Result<Self, CliError> {
        let as_path = PathBuf::from(run);
        let root = if as_path.join("manifest.json").exists() {
            as_path
        } else {
            out.join(run)
        };
        if !root.join("manifest.json").exists() {
            return Err(CliError::Usage(format!("no run `{run}` (looked for {})", root.join("manifest.json").display())));
        }
        let id = root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(Self { root, id })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn trace_rel(stem: &str) -> String {
        format!("traces/{stem}.jsonl")
    }

    pub fn transcript_rel(stem: &str) -> String {
        format!("transcripts/{stem}.jsonl")
    }

    pub fn manifest(&self) -> Result<RunManifest, CliError> {
        RunManifest::load(&self.path("manifest.json")).map_err(input)
    }
}

/// Files written so far, relative to the run directory.
#[derive(Debug, Default)]
struct Artifacts(Vec<String>);

impl Artifacts {
    fn write(&mut self, run: &RunDir, rel: &str, text: &str) -> Result<(), CliError> {
        store::write_atomic(&run.path(rel), text).map_err(domain)?;
        if !self.0.iter().any(|a| a == rel) {
            self.0.push(rel.to_owned());
        }
        Ok(())
    }

    fn note(&mut self, rel: &str) {
        if !self.0.iter().any(|a| a == rel) {
            self.0.push(rel.to_owned());
        }
    }
}

fn json_pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

pub fn load_corpus(path: &Path) -> Result<Vec<Problem>, CliError> {
    store::load_corpus(path).map_err(input)
}

/// Loads the knowledge base at `path`, or starts an empty one if the file does
/// not exist. The configured embedder must match a stored one.
pub fn open_kb(path: &Path, cfg: &CacConfig) -> Result<KnowledgeBase, CliError> {
    if !path.exists() {
        return Ok(KnowledgeBase::new(cfg.embedder.clone()));
    }
    let kb = store::load_kb(path).map_err(input)?;
    if !kb.embedder_config().compatible_with(&cfg.embedder) {
        return Err(CliError::Config(format!(
            "{} was built with embedder {:?} but the configuration names {:?}",
            path.display(),
            kb.embedder_config(),
            cfg.embedder
        )));
    }
    Ok(kb)
}

pub fn pick_problems(corpus: &[Problem], ids: &[String]) -> Result<Vec<Problem>, CliError> {
    if ids.is_empty() {
        return Ok(corpus.to_vec());
    }
    ids.iter()
        .map(|id| {
            corpus
                .iter()
                .find(|p| &p.id == id)
                .cloned()
                .ok_or_else(|| CliError::Usage(format!("no problem `{id}` in the corpus")))
        })
        .collect()
}

/// Builds the configured embedder wrapped so its calls can be saved.
pub fn recording_embedder(kb: &KnowledgeBase) -> Result<RecordingEmbedder<Box<dyn Embedder>>, CliError> {
    let inner = crate::profiles::build_embedder(kb.embedder_config()).map_err(CliError::Config)?;
    Ok(RecordingEmbedder::new(inner))
}

fn save_embeddings(
    run: &RunDir,
    arts: &mut Artifacts,
    kb: &KnowledgeBase,
    emb: &RecordingEmbedder<Box<dyn Embedder>>,
) -> Result<(), CliError> {
    if kb.embedder_config().kind == EmbedderKind::Reference {
        return Ok(());
    }
    let records: Vec<EmbeddingRecord> = emb
        .recorded()
        .into_iter()
        .map(|(text, vector)| EmbeddingRecord { text, vector })
        .collect();
    arts.write(run, "embeddings.jsonl", &store::embeddings_to_string(&records))
}

/// Embedder for offline reproduction of a run.
fn replay_embedder(run: &RunDir, kb: &KnowledgeBase) -> Result<Box<dyn Embedder>, CliError> {
    let cfg = kb.embedder_config();
    if cfg.kind == EmbedderKind::Reference {
        return Ok(Box::new(ReferenceEmbedder::new(cfg.dimension)));
    }
    let text = std::fs::read_to_string(run.path("embeddings.jsonl")).map_err(input)?;
    let table = store::embeddings_from_str(&text)
        .map_err(input)?
        .into_iter()
        .map(|r| (r.text, r.vector))
        .collect();
    Ok(Box::new(ReplayEmbedder::new(cfg.clone(), table)))
}

/// One attempt with its backend transcript.
pub fn recorded_attempt(
    problem: &Problem,
    view: &KbView<'_>,
    backend: &dyn ModelBackend,
    embedder: &dyn Embedder,
    agent: &AgentConfig,
) -> Result<(AttemptResult, Vec<TranscriptEntry>), CliError> {
    let rec = RecordingBackend::new(backend);
    let attempt = run_attempt(problem, view, &rec, embedder, agent).map_err(input)?;
    Ok((attempt, rec.take_transcript()))
}

fn write_attempt(
    run: &RunDir,
    arts: &mut Artifacts,
    stem: &str,
    attempt: &AttemptResult,
    transcript: &[TranscriptEntry],
) -> Result<(), CliError> {
    arts.write(run, &RunDir::trace_rel(stem), &store::trace_to_string(attempt))?;
    arts.write(run, &RunDir::transcript_rel(stem), &store::transcript_to_string(transcript))
}

fn new_manifest(cfg: &CacConfig, run: &RunDir, mode: &str, started_at: u64) -> RunManifest {
    RunManifest::new(run.id.clone(), mode, cfg.to_toml(), started_at)
}

fn finish(run: &RunDir, mut manifest: RunManifest, arts: Artifacts) -> Result<RunManifest, CliError> {
    manifest.artifacts = arts.0;
    manifest.finished_at = Some(now_secs());
    manifest.save(&run.path("manifest.json")).map_err(domain)?;
    Ok(manifest)
}

fn resolve_removed(kb: &KnowledgeBase, removed: &[String]) -> Result<BTreeSet<DmId>, CliError> {
    let set: BTreeSet<DmId> = removed.iter().map(|s| DmId::new(s.as_str())).collect();
    kb.ablation_view(&set).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(set)
}

// ---------------------------------------------------------------------------
// solve

#[derive(Debug, Clone)]
pub struct SolveSpec {
    pub problems: Vec<Problem>,
    pub kb_path: Option<PathBuf>,
    pub corpus_path: Option<PathBuf>,
    pub revision: Option<u64>,
    pub removed: Vec<String>,
}

#[derive(Debug)]
pub struct SolveOutput {
    pub run: RunDir,
    pub attempts: Vec<AttemptResult>,
}

pub fn solve(
    cfg: &CacConfig,
    run: RunDir,
    spec: &SolveSpec,
    kb: &KnowledgeBase,
    backend: &dyn ModelBackend,
    started_at: u64,
) -> Result<SolveOutput, CliError> {
    let revision = spec.revision.unwrap_or(kb.revision());
    let base = kb.view_at(revision).map_err(|e| CliError::Usage(e.to_string()))?;
    let removed = resolve_removed(kb, &spec.removed)?;
    let view = base.without(&removed).map_err(|e| CliError::Usage(e.to_string()))?;
    let embedder = recording_embedder(kb)?;
    let mut manifest = new_manifest(cfg, &run, "solve", started_at);
    manifest.kb_path = spec.kb_path.as_ref().map(|p| p.display().to_string());
    manifest.corpus_path = spec.corpus_path.as_ref().map(|p| p.display().to_string());
    manifest.kb_revision_start = revision;
    manifest.kb_revision_end = revision;
    let mut arts = Artifacts::default();
    arts.write(&run, "problems.jsonl", &store::corpus_to_string(&spec.problems))?;
    arts.write(&run, "kb.jsonl", &store::kb_to_string(&kb.at_revision(revision).map_err(domain)?))?;
    let mut attempts = Vec::new();
    for p in &spec.problems {
        let (attempt, transcript) = recorded_attempt(p, &view, backend, &embedder, &cfg.agent)?;
        write_attempt(&run, &mut arts, &p.id, &attempt, &transcript)?;
        attempts.push(attempt);
    }
    save_embeddings(&run, &mut arts, kb, &embedder)?;
    finish(&run, manifest, arts)?;
    Ok(SolveOutput { run, attempts })
}

/// Incorrect answers are results; only attempts that did not finish count as
/// failures.
pub fn solve_failed(attempts: &[AttemptResult]) -> bool {
    attempts
        .iter()
        .any(|a| matches!(a.outcome, Outcome::StepLimit | Outcome::BackendFailure))
}

// ---------------------------------------------------------------------------
// ablate

/// DMs to remove: explicit ids, or every DM the base attempt retrieved.
#[derive(Debug, Clone)]
pub enum AblationTarget {
    Ids(Vec<String>),
    TopRetrieved,
}

#[allow(clippy::too_many_arguments)]
pub fn ablate(
    cfg: &CacConfig,
    run: RunDir,
    problem: &Problem,
    kb_path: Option<&Path>,
    kb: &KnowledgeBase,
    target: &AblationTarget,
    backend: &dyn ModelBackend,
    started_at: u64,
) -> Result<(RunDir, AblationRun), CliError> {
    let explicit = match target {
        AblationTarget::Ids(ids) => Some(resolve_removed(kb, ids)?),
        AblationTarget::TopRetrieved => None,
    };
    let embedder = recording_embedder(kb)?;
    let mut manifest = new_manifest(cfg, &run, "ablate", started_at);
    manifest.kb_path = kb_path.map(|p| p.display().to_string());
    manifest.kb_revision_start = kb.revision();
    manifest.kb_revision_end = kb.revision();
    let mut arts = Artifacts::default();
    arts.write(&run, "problems.jsonl", &store::corpus_to_string(std::slice::from_ref(problem)))?;
    arts.write(&run, "kb.jsonl", &store::kb_to_string(kb))?;

    let (base, base_t) = recorded_attempt(problem, &kb.view(), backend, &embedder, &cfg.agent)?;
    let removed = explicit.unwrap_or_else(|| eval::top_retrieved_candidates(&base));
    let view = kb.ablation_view(&removed).map_err(domain)?;
    let (ablated, ablated_t) = recorded_attempt(problem, &view, backend, &embedder, &cfg.agent)?;
    let base_stem = format!("{}.base", problem.id);
    let ablated_stem = format!("{}.ablated", problem.id);
    write_attempt(&run, &mut arts, &base_stem, &base, &base_t)?;
    write_attempt(&run, &mut arts, &ablated_stem, &ablated, &ablated_t)?;
    let report = AblationReport {
        problem_id: problem.id.clone(),
        kb_revision: kb.revision(),
        removed_ids: removed.into_iter().collect(),
        base_outcome: base.outcome,
        ablated_outcome: ablated.outcome,
        verdict: eval::verdict(base.outcome, ablated.outcome),
        divergence_index: eval::divergence_index(&base, &ablated),
        trace_refs: Some(TraceRefs {
            base: RunDir::trace_rel(&base_stem),
            ablated: RunDir::trace_rel(&ablated_stem),
        }),
    };
    arts.write(&run, "ablation.json", &json_pretty(&report))?;
    save_embeddings(&run, &mut arts, kb, &embedder)?;
    finish(&run, manifest, arts)?;
    Ok((run, AblationRun { report, base, ablated }))
}

// ---------------------------------------------------------------------------
// compile

#[derive(Debug)]
pub struct CompileOutput {
    pub run: RunDir,
    pub stats: CompilationStats,
    pub all_compiled: bool,
}

/// Compiles `problems` into the knowledge base at `kb_path` under its writer
/// lock. Each committed revision is appended to the file as soon as its
/// problem finishes. Provenance timestamps are the run's start time.
#[allow(clippy::too_many_arguments)]
pub fn compile(
    cfg: &CacConfig,
    run: RunDir,
    problems: &[Problem],
    kb_path: &Path,
    corpus_path: Option<&Path>,
    backend: &dyn ModelBackend,
    teacher: &dyn TeacherBackend,
    started_at: u64,
) -> Result<CompileOutput, CliError> {
    let _lock = KbLock::acquire(kb_path).map_err(|e| match e {
        StoreError::Locked { .. } => domain(format!("{e}; another compile is running")),
        other => domain(other),
    })?;
    let mut kb = open_kb(kb_path, cfg)?;
    let existed = kb_path.exists();
    let mut on_disk = if existed { kb.revision() } else { 0 };
    if !existed {
        store::save_kb(kb_path, &kb).map_err(domain)?;
    }
    let embedder = recording_embedder(&kb)?;
    let mut manifest = new_manifest(cfg, &run, "compile", started_at);
    manifest.kb_path = Some(kb_path.display().to_string());
    manifest.corpus_path = corpus_path.map(|p| p.display().to_string());
    manifest.kb_revision_start = kb.revision();
    let mut arts = Artifacts::default();
    arts.write(&run, "problems.jsonl", &store::corpus_to_string(problems))?;
    arts.write(&run, "kb.jsonl", &store::kb_to_string(&kb))?;

    let recorder = RecordingBackend::new(backend);
    let log_path = run.path("compile_log.jsonl");
    let mut io_error: Option<CliError> = None;
    let compiled = compile_corpus(
        problems,
        &mut kb,
        &recorder,
        teacher,
        &embedder,
        &cfg.agent,
        &cfg.compile,
        &FixedClock(started_at),
        &mut |log, kb| {
            let result = (|| -> Result<(), CliError> {
                store::append_kb(kb_path, kb, on_disk).map_err(domain)?;
                on_disk = kb.revision();
                store::append_compile_log(&log_path, log).map_err(domain)?;
                let last = &log.iterations.last().expect("at least one iteration").attempt;
                let transcript = recorder.take_transcript();
                let mut local = Artifacts::default();
                write_attempt(&run, &mut local, &log.problem_id, last, &transcript)
            })();
            if let (Err(e), None) = (result, &io_error) {
                io_error = Some(e);
            }
        },
    )
    .map_err(domain)?;
    if let Some(e) = io_error {
        return Err(e);
    }
    arts.note("compile_log.jsonl");
    for p in problems {
        arts.note(&RunDir::trace_rel(&p.id));
        arts.note(&RunDir::transcript_rel(&p.id));
    }
    arts.write(&run, "stats.json", &json_pretty(&compiled.stats))?;
    save_embeddings(&run, &mut arts, &kb, &embedder)?;
    manifest.kb_revision_end = kb.revision();
    finish(&run, manifest, arts)?;
    Ok(CompileOutput {
        run,
        all_compiled: compiled.stats.problems_compiled == compiled.stats.problems_attempted,
        stats: compiled.stats,
    })
}

// ---------------------------------------------------------------------------
// probe-fan

pub fn probe_fan(cfg: &CacConfig, run: RunDir, probe: &FanProbeConfig, started_at: u64) -> Result<(RunDir, FanReport), CliError> {
    let embedder = crate::profiles::build_embedder(&cfg.embedder).map_err(CliError::Config)?;
    let report = eval::fan_effect_probe(probe, embedder.as_ref()).map_err(|e| match e {
        eval::EvalError::Probe(m) => CliError::Usage(m),
        other => domain(other),
    })?;
    let manifest = new_manifest(cfg, &run, "probe", started_at);
    let mut arts = Artifacts::default();
    arts.write(&run, "fan.json", &json_pretty(&report))?;
    arts.write(&run, "fan.csv", &report.to_csv())?;
    finish(&run, manifest, arts)?;
    Ok((run, report))
}

// ---------------------------------------------------------------------------
// replay

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub compared: Vec<String>,
    pub mismatched: Vec<String>,
}

impl ReplayReport {
    pub fn identical(&self) -> bool {
        self.mismatched.is_empty()
    }
}

fn trace_stems(run: &RunDir) -> Result<Vec<String>, CliError> {
    let dir = run.path("traces");
    let mut stems: Vec<String> = std::fs::read_dir(&dir)
        .map_err(|e| input(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            name.strip_suffix(".jsonl").map(str::to_owned)
        })
        .collect();
    stems.sort();
    Ok(stems)
}

fn read_string(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| input(format!("{}: {e}", path.display())))
}

/// Re-executes a run from its directory alone, answering every backend call
/// from the saved transcripts. Reproduced files go to `<run>/replay/` and are
/// compared byte for byte with the originals.
pub fn replay(run: &RunDir) -> Result<ReplayReport, CliError> {
    let manifest = run.manifest()?;
    let cfg = CacConfig::from_toml(&manifest.config_toml).map_err(input)?;
    let kb = store::load_kb(&run.path("kb.jsonl")).map_err(input)?;
    let problems = store::load_corpus(&run.path("problems.jsonl")).map_err(input)?;
    let embedder = replay_embedder(run, &kb)?;
    let mut report = ReplayReport::default();
    let check = |rel: &str, produced: &str, report: &mut ReplayReport| -> Result<(), CliError> {
        let original = read_string(&run.path(rel))?;
        store::write_atomic(&run.path(&format!("replay/{rel}")), produced).map_err(domain)?;
        report.compared.push(rel.to_owned());
        if original != produced {
            report.mismatched.push(rel.to_owned());
        }
        Ok(())
    };
    match manifest.mode.as_str() {
        "solve" | "ablate" => {
            for stem in trace_stems(run)? {
                let trace_rel = RunDir::trace_rel(&stem);
                let original = store::load_trace(&run.path(&trace_rel)).map_err(input)?;
                let problem = problems
                    .iter()
                    .find(|p| p.id == original.problem_id)
                    .ok_or_else(|| input(format!("{trace_rel}: problem {} not in run", original.problem_id)))?;
                let removed: BTreeSet<DmId> = original.removed_ids.iter().cloned().collect();
                let view = kb
                    .view_at(original.kb_revision)
                    .and_then(|v| v.without(&removed))
                    .map_err(input)?;
                let transcript = store::load_transcript(&run.path(&RunDir::transcript_rel(&stem))).map_err(input)?;
                let backend = ReplayBackend::new(transcript);
                let attempt = run_attempt(problem, &view, &backend, embedder.as_ref(), &cfg.agent).map_err(domain)?;
                check(&trace_rel, &store::trace_to_string(&attempt), &mut report)?;
                if backend.remaining() != 0 {
                    report.mismatched.push(format!("{}: {} unused calls", RunDir::transcript_rel(&stem), backend.remaining()));
                }
            }
        }
        "compile" => {
            let logs = store::load_compile_logs(&run.path("compile_log.jsonl")).map_err(input)?;
            let teacher = ReplayTeacher::from_logs(&logs);
            let mut kb = kb;
            let mut produced_logs = Vec::new();
            for log in &logs {
                let problem = problems
                    .iter()
                    .find(|p| p.id == log.problem_id)
                    .ok_or_else(|| input(format!("problem {} not in run", log.problem_id)))?;
                let transcript = store::load_transcript(&run.path(&RunDir::transcript_rel(&problem.id))).map_err(input)?;
                let backend = ReplayBackend::new(transcript);
                let replayed = compile_problem(
                    problem,
                    &mut kb,
                    &backend,
                    &teacher,
                    embedder.as_ref(),
                    &cfg.agent,
                    &cfg.compile,
                    &FixedClock(manifest.started_at),
                )
                .map_err(domain)?;
                let last = &replayed.iterations.last().expect("at least one iteration").attempt;
                check(&RunDir::trace_rel(&problem.id), &store::trace_to_string(last), &mut report)?;
                produced_logs.push(replayed);
            }
            check("compile_log.jsonl", &store::compile_logs_to_string(&produced_logs), &mut report)?;
        }
        other => return Err(CliError::Usage(format!("runs of mode `{other}` have nothing to replay"))),
    }
    Ok(report)
}
