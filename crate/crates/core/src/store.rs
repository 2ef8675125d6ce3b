//! Line-oriented persistence. Every file starts with a header line naming its
//! format and version; each following line is one JSON record.
//!
//! Knowledge-base files are written revision by revision, so the bytes of
//! revision `r` are always a prefix of the bytes of revision `r + 1` and
//! appending a revision never rewrites earlier lines.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::{AttemptResult, Outcome, Problem, StepRecord};
use crate::backend::TranscriptEntry;
use crate::embedder::{Embedder, EmbedderConfig, EmbeddingVector};
use crate::kb::{DeclarativeMemory, DmId, KnowledgeBase};
use crate::teacher::CompilationLog;

pub const FORMAT_VERSION: u32 = 1;
pub const KB_FORMAT: &str = "cac-kb";
pub const CORPUS_FORMAT: &str = "cac-corpus";
pub const TRACE_FORMAT: &str = "cac-trace";
pub const TRANSCRIPT_FORMAT: &str = "cac-transcript";
pub const COMPILE_LOG_FORMAT: &str = "cac-compile-log";
pub const EMBEDDINGS_FORMAT: &str = "cac-embeddings";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line} (byte {offset}): {message}")]
    Parse { line: usize, offset: usize, message: String },
    #[error("missing header line")]
    MissingHeader,
    #[error("expected format `{expected}`, found `{found}`")]
    WrongFormat { expected: String, found: String },
    #[error("unsupported {format} format_version {found} (supported: {supported})")]
    UnsupportedVersion { format: String, found: u32, supported: u32 },
    #[error("line {line} (byte {offset}): truncated record")]
    Truncated { line: usize, offset: usize },
    #[error("line {line}: key dimension {found} does not match embedder dimension {expected}")]
    DimensionMismatch { line: usize, expected: usize, found: usize },
    #[error("{count} DM record(s) after the last commit")]
    UncommittedTail { count: usize },
    #[error("line {line}: {message}")]
    Inconsistent { line: usize, message: String },
    #[error("revision {revision} does not replay: {message}")]
    Replay { revision: u64, message: String },
    #[error("knowledge base {path} is locked by another writer")]
    Locked { path: PathBuf },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BareHeader {
    format: String,
    format_version: u32,
}

struct Line<'a> {
    number: usize,
    offset: usize,
    text: &'a str,
    /// Whether the line ended with a newline.
    terminated: bool,
}

fn lines(text: &str) -> Vec<Line<'_>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for (i, raw) in text.split_inclusive('\n').enumerate() {
        let terminated = raw.ends_with('\n');
        let body = raw.strip_suffix('\n').unwrap_or(raw);
        let body = body.strip_suffix('\r').unwrap_or(body);
        if !body.trim().is_empty() {
            out.push(Line {
                number: i + 1,
                offset,
                text: body,
                terminated,
            });
        }
        offset += raw.len();
    }
    out
}

fn parse_line<T: DeserializeOwned>(line: &Line<'_>) -> Result<T, StoreError> {
    serde_json::from_str(line.text).map_err(|e| {
        if !line.terminated && e.is_eof() {
            StoreError::Truncated {
                line: line.number,
                offset: line.offset,
            }
        } else {
            StoreError::Parse {
                line: line.number,
                offset: line.offset,
                message: e.to_string(),
            }
        }
    })
}

/// Splits a file into its validated header and record lines.
fn open_records<'a, H: DeserializeOwned>(text: &'a str, format: &str) -> Result<(H, Vec<Line<'a>>), StoreError> {
    let mut all = lines(text).into_iter();
    let first = all.next().ok_or(StoreError::MissingHeader)?;
    let bare: BareHeader = parse_line(&first)?;
    if bare.format != format {
        return Err(StoreError::WrongFormat {
            expected: format.into(),
            found: bare.format,
        });
    }
    if bare.format_version != FORMAT_VERSION {
        return Err(StoreError::UnsupportedVersion {
            format: format.into(),
            found: bare.format_version,
            supported: FORMAT_VERSION,
        });
    }
    Ok((parse_line(&first)?, all.collect()))
}

fn json_line<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string(value).expect("records serialize");
    s.push('\n');
    s
}

fn read_text(path: &Path) -> Result<String, StoreError> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Writes via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), StoreError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// Knowledge base

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbHeader {
    pub format: String,
    pub format_version: u32,
    pub embedder: EmbedderConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum KbRecord {
    Dm(Box<DeclarativeMemory>),
    Commit { revision: u64, size: usize },
}

fn kb_header(kb: &KnowledgeBase) -> String {
    json_line(&KbHeader {
        format: KB_FORMAT.into(),
        format_version: FORMAT_VERSION,
        embedder: kb.embedder_config().clone(),
    })
}

/// Lines for revisions `from + 1 ..= kb.revision()`.
fn kb_revisions_text(kb: &KnowledgeBase, from: u64) -> String {
    let mut out = String::new();
    let commits = kb.commits();
    for r in from..kb.revision() {
        let start = if r == 0 { 0 } else { commits[r as usize - 1] };
        let end = commits[r as usize];
        for dm in &kb.dms()[start..end] {
            out.push_str(&json_line(&KbRecord::Dm(Box::new(dm.clone()))));
        }
        out.push_str(&json_line(&KbRecord::Commit {
            revision: r + 1,
            size: end,
        }));
    }
    out
}

pub fn kb_to_string(kb: &KnowledgeBase) -> String {
    let mut s = kb_header(kb);
    s.push_str(&kb_revisions_text(kb, 0));
    s
}

/// How to treat records after the last commit marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadMode {
    /// Any trailing uncommitted or truncated data is an error.
    Strict,
    /// Trailing uncommitted DMs and a truncated last line are dropped, as
    /// left behind by an interrupted append.
    Committed,
}

pub fn kb_from_str(text: &str, mode: LoadMode) -> Result<KnowledgeBase, StoreError> {
    let (header, records): (KbHeader, _) = open_records(text, KB_FORMAT)?;
    let dim = header.embedder.dimension;
    let mut dms: Vec<DeclarativeMemory> = Vec::new();
    let mut commits: Vec<usize> = Vec::new();
    let n = records.len();
    for (i, line) in records.iter().enumerate() {
        let record: KbRecord = match parse_line(line) {
            Err(StoreError::Truncated { .. }) if mode == LoadMode::Committed && i + 1 == n => break,
            other => other?,
        };
        match record {
            KbRecord::Dm(dm) => {
                if dm.seq != dms.len() as u64 {
                    return Err(StoreError::Inconsistent {
                        line: line.number,
                        message: format!("expected seq {}, found {}", dms.len(), dm.seq),
                    });
                }
                for key in [&dm.key_goal, &dm.key_wm] {
                    if key.dimension() != dim {
                        return Err(StoreError::DimensionMismatch {
                            line: line.number,
                            expected: dim,
                            found: key.dimension(),
                        });
                    }
                }
                dms.push(*dm);
            }
            KbRecord::Commit { revision, size } => {
                if revision != commits.len() as u64 + 1 || size != dms.len() {
                    return Err(StoreError::Inconsistent {
                        line: line.number,
                        message: format!(
                            "commit {revision} of size {size} does not follow revision {} with {} DMs",
                            commits.len(),
                            dms.len()
                        ),
                    });
                }
                commits.push(size);
            }
        }
    }
    let committed = commits.last().copied().unwrap_or(0);
    if dms.len() > committed {
        if mode == LoadMode::Strict {
            return Err(StoreError::UncommittedTail {
                count: dms.len() - committed,
            });
        }
        dms.truncate(committed);
    }
    Ok(KnowledgeBase::from_parts(header.embedder, dms, commits))
}

/// Rebuilds a knowledge base from a log by re-applying each committed
/// revision through `append_dms`, re-embedding every condition. Any recomputed
/// id, key or provenance that differs from the log is an error.
pub fn replay_kb_log(text: &str, embedder: &dyn Embedder) -> Result<KnowledgeBase, StoreError> {
    let logged = kb_from_str(text, LoadMode::Strict)?;
    let mut kb = KnowledgeBase::new(logged.embedder_config().clone());
    let mut start = 0;
    for (r, &end) in logged.commits().iter().enumerate() {
        let revision = r as u64 + 1;
        let batch = &logged.dms()[start..end];
        let fail = |message: String| StoreError::Replay { revision, message };
        let provenance = &batch.first().ok_or_else(|| fail("empty revision".into()))?.provenance;
        if batch.iter().any(|dm| &dm.provenance != provenance) {
            return Err(fail("mixed provenance within one revision".into()));
        }
        let drafts: Vec<_> = batch.iter().map(DeclarativeMemory::draft).collect();
        kb.append_dms(&drafts, provenance, embedder)
            .map_err(|e| fail(e.to_string()))?;
        if kb.dms()[start..end] != *batch {
            return Err(fail("recomputed DMs differ from the log".into()));
        }
        start = end;
    }
    Ok(kb)
}

pub fn load_kb(path: &Path) -> Result<KnowledgeBase, StoreError> {
    kb_from_str(&read_text(path)?, LoadMode::Strict)
}

pub fn load_kb_committed(path: &Path) -> Result<KnowledgeBase, StoreError> {
    kb_from_str(&read_text(path)?, LoadMode::Committed)
}

pub fn save_kb(path: &Path, kb: &KnowledgeBase) -> Result<(), StoreError> {
    write_atomic(path, &kb_to_string(kb))
}

/// Appends revisions of `kb` newer than `on_disk` to an existing file (or
/// writes the whole knowledge base when `on_disk` is zero and the file does
/// not exist). Each revision is flushed as one write.
pub fn append_kb(path: &Path, kb: &KnowledgeBase, on_disk: u64) -> Result<(), StoreError> {
    if !path.exists() {
        return save_kb(path, kb);
    }
    let text = kb_revisions_text(kb, on_disk);
    if text.is_empty() {
        return Ok(());
    }
    let mut f = OpenOptions::new().append(true).open(path).map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))?;
    f.sync_data().map_err(io_err(path))
}

/// Exclusive writer lock on a knowledge base, held as `<kb>.lock`.
#[derive(Debug)]
pub struct KbLock {
    path: PathBuf,
}

impl KbLock {
    pub fn lock_path(kb: &Path) -> PathBuf {
        let mut p = kb.as_os_str().to_owned();
        p.push(".lock");
        PathBuf::from(p)
    }

    pub fn acquire(kb: &Path) -> Result<Self, StoreError> {
        let path = Self::lock_path(kb);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(StoreError::Locked { path: kb.to_owned() }),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    pub fn is_locked(kb: &Path) -> bool {
        Self::lock_path(kb).exists()
    }
}

impl Drop for KbLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

// ---------------------------------------------------------------------------
// Corpus

pub fn corpus_to_string(problems: &[Problem]) -> String {
    let mut s = json_line(&BareHeader {
        format: CORPUS_FORMAT.into(),
        format_version: FORMAT_VERSION,
    });
    for p in problems {
        s.push_str(&json_line(p));
    }
    s
}

pub fn corpus_from_str(text: &str) -> Result<Vec<Problem>, StoreError> {
    let (_, records): (BareHeader, _) = open_records(text, CORPUS_FORMAT)?;
    let mut ids = std::collections::BTreeSet::new();
    records
        .iter()
        .map(|line| {
            let p: Problem = parse_line(line)?;
            p.validate().map_err(|e| StoreError::Inconsistent {
                line: line.number,
                message: e.to_string(),
            })?;
            if !ids.insert(p.id.clone()) {
                return Err(StoreError::Inconsistent {
                    line: line.number,
                    message: format!("duplicate problem id {}", p.id),
                });
            }
            Ok(p)
        })
        .collect()
}

pub fn load_corpus(path: &Path) -> Result<Vec<Problem>, StoreError> {
    corpus_from_str(&read_text(path)?)
}

pub fn save_corpus(path: &Path, problems: &[Problem]) -> Result<(), StoreError> {
    write_atomic(path, &corpus_to_string(problems))
}

// ---------------------------------------------------------------------------
// Traces

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format: String,
    pub format_version: u32,
    pub problem_id: String,
    pub kb_revision: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub removed_ids: Vec<DmId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TraceResult {
    final_answer_text: Option<String>,
    option_distribution: std::collections::BTreeMap<String, f64>,
    predicted_letter: Option<String>,
    outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    diagnostic: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum TraceRecord {
    Step(Box<StepRecord>),
    Result(TraceResult),
}

pub fn trace_to_string(attempt: &AttemptResult) -> String {
    let mut s = json_line(&TraceHeader {
        format: TRACE_FORMAT.into(),
        format_version: FORMAT_VERSION,
        problem_id: attempt.problem_id.clone(),
        kb_revision: attempt.kb_revision,
        removed_ids: attempt.removed_ids.clone(),
    });
    for step in &attempt.history {
        s.push_str(&json_line(&TraceRecord::Step(Box::new(step.clone()))));
    }
    s.push_str(&json_line(&TraceRecord::Result(TraceResult {
        final_answer_text: attempt.final_answer_text.clone(),
        option_distribution: attempt.option_distribution.clone(),
        predicted_letter: attempt.predicted_letter.clone(),
        outcome: attempt.outcome,
        diagnostic: attempt.diagnostic.clone(),
    })));
    s
}

pub fn trace_from_str(text: &str) -> Result<AttemptResult, StoreError> {
    let (header, records): (TraceHeader, _) = open_records(text, TRACE_FORMAT)?;
    let mut history = Vec::new();
    let mut result = None;
    for line in &records {
        if result.is_some() {
            return Err(StoreError::Inconsistent {
                line: line.number,
                message: "record after the result line".into(),
            });
        }
        match parse_line(line)? {
            TraceRecord::Step(step) => history.push(*step),
            TraceRecord::Result(r) => result = Some(r),
        }
    }
    let r = result.ok_or(StoreError::Inconsistent {
        line: records.last().map_or(1, |l| l.number),
        message: "trace has no result line".into(),
    })?;
    Ok(AttemptResult {
        problem_id: header.problem_id,
        kb_revision: header.kb_revision,
        removed_ids: header.removed_ids,
        history,
        final_answer_text: r.final_answer_text,
        option_distribution: r.option_distribution,
        predicted_letter: r.predicted_letter,
        outcome: r.outcome,
        diagnostic: r.diagnostic,
    })
}

pub fn load_trace(path: &Path) -> Result<AttemptResult, StoreError> {
    trace_from_str(&read_text(path)?)
}

pub fn save_trace(path: &Path, attempt: &AttemptResult) -> Result<(), StoreError> {
    write_atomic(path, &trace_to_string(attempt))
}

// ---------------------------------------------------------------------------
// Generic record files: backend transcripts, compile logs, embeddings

fn records_to_string<T: Serialize>(format: &str, records: &[T]) -> String {
    let mut s = json_line(&BareHeader {
        format: format.into(),
        format_version: FORMAT_VERSION,
    });
    for r in records {
        s.push_str(&json_line(r));
    }
    s
}

fn records_from_str<T: DeserializeOwned>(text: &str, format: &str) -> Result<Vec<T>, StoreError> {
    let (_, records): (BareHeader, _) = open_records(text, format)?;
    records.iter().map(parse_line).collect()
}

pub fn transcript_to_string(entries: &[TranscriptEntry]) -> String {
    records_to_string(TRANSCRIPT_FORMAT, entries)
}

pub fn transcript_from_str(text: &str) -> Result<Vec<TranscriptEntry>, StoreError> {
    records_from_str(text, TRANSCRIPT_FORMAT)
}

pub fn load_transcript(path: &Path) -> Result<Vec<TranscriptEntry>, StoreError> {
    transcript_from_str(&read_text(path)?)
}

pub fn save_transcript(path: &Path, entries: &[TranscriptEntry]) -> Result<(), StoreError> {
    write_atomic(path, &transcript_to_string(entries))
}

pub fn compile_logs_to_string(logs: &[CompilationLog]) -> String {
    records_to_string(COMPILE_LOG_FORMAT, logs)
}

pub fn compile_logs_from_str(text: &str) -> Result<Vec<CompilationLog>, StoreError> {
    records_from_str(text, COMPILE_LOG_FORMAT)
}

pub fn load_compile_logs(path: &Path) -> Result<Vec<CompilationLog>, StoreError> {
    compile_logs_from_str(&read_text(path)?)
}

/// Appends one log line, writing the header first if the file is new.
pub fn append_compile_log(path: &Path, log: &CompilationLog) -> Result<(), StoreError> {
    let mut text = String::new();
    if !path.exists() {
        text.push_str(&records_to_string::<CompilationLog>(COMPILE_LOG_FORMAT, &[]));
    }
    text.push_str(&json_line(log));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub text: String,
    pub vector: EmbeddingVector,
}

pub fn embeddings_to_string(records: &[EmbeddingRecord]) -> String {
    records_to_string(EMBEDDINGS_FORMAT, records)
}

pub fn embeddings_from_str(text: &str) -> Result<Vec<EmbeddingRecord>, StoreError> {
    records_from_str(text, EMBEDDINGS_FORMAT)
}

// ---------------------------------------------------------------------------
// Run manifests

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub format_version: u32,
    pub run_id: String,
    pub mode: String,
    pub config_toml: String,
    /// Hex sha256 of `config_toml`.
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kb_path: Option<String>,
    pub kb_revision_start: u64,
    pub kb_revision_end: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_path: Option<String>,
    pub artifacts: Vec<String>,
    pub started_at: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<u64>,
}

pub fn sha256_hex(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl RunManifest {
    pub fn new(run_id: impl Into<String>, mode: impl Into<String>, config_toml: String, started_at: u64) -> Self {
        Self {
            format: "cac-run".into(),
            format_version: FORMAT_VERSION,
            run_id: run_id.into(),
            mode: mode.into(),
            config_hash: sha256_hex(&config_toml),
            config_toml,
            kb_path: None,
            kb_revision_start: 0,
            kb_revision_end: 0,
            corpus_path: None,
            artifacts: Vec::new(),
            started_at,
            finished_at: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        write_atomic(path, &text)
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let text = read_text(path)?;
        serde_json::from_str(&text).map_err(|e| StoreError::Parse {
            line: e.line(),
            offset: 0,
            message: e.to_string(),
        })
    }
}

/// Creates `path`'s parent and opens it for writing.
pub fn create_file(path: &Path) -> Result<File, StoreError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    File::create(path).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn kb_round_trip_and_prefix() {
        let (mut kb, e) = fixtures::fiber_kb();
        let r1 = kb_to_string(&kb);
        kb.append_dms(&fixtures::fiber_drafts()[..1], &crate::kb::Provenance::human(5), &e)
            .unwrap();
        let r2 = kb_to_string(&kb);
        assert!(r2.starts_with(&r1));
        assert_eq!(kb_from_str(&r2, LoadMode::Strict).unwrap(), kb);
    }

    #[test]
    fn strict_rejects_uncommitted_tail_committed_drops_it() {
        let (kb, _) = fixtures::fiber_kb();
        let text = kb_to_string(&kb);
        let dm_line = text.lines().nth(1).unwrap();
        let tail = format!("{text}{dm_line}\n");
        assert!(matches!(
            kb_from_str(&tail, LoadMode::Strict),
            Err(StoreError::Inconsistent { .. })
        ));
        let mut dm: serde_json::Value = serde_json::from_str(dm_line).unwrap();
        dm["seq"] = 4.into();
        let tail = format!("{text}{}\n", dm);
        assert!(matches!(
            kb_from_str(&tail, LoadMode::Strict),
            Err(StoreError::UncommittedTail { count: 1 })
        ));
        assert_eq!(kb_from_str(&tail, LoadMode::Committed).unwrap(), kb);
    }

    #[test]
    fn truncated_last_line() {
        let (kb, _) = fixtures::fiber_kb();
        let text = kb_to_string(&kb);
        let cut = &text[..text.len() - 10];
        let err = kb_from_str(cut, LoadMode::Strict).unwrap_err();
        assert!(matches!(err, StoreError::Truncated { line: 6, .. }), "{err}");
        assert_eq!(kb_from_str(cut, LoadMode::Committed).unwrap().len(), 0);
    }

    #[test]
    fn version_and_format_checks() {
        let bad = "{\"format\":\"cac-kb\",\"format_version\":2,\"embedder\":{\"kind\":\"reference\",\"dimension\":256}}\n";
        assert!(matches!(
            kb_from_str(bad, LoadMode::Strict),
            Err(StoreError::UnsupportedVersion { found: 2, .. })
        ));
        assert!(matches!(corpus_from_str(bad), Err(StoreError::WrongFormat { .. })));
        assert!(matches!(kb_from_str("", LoadMode::Strict), Err(StoreError::MissingHeader)));
    }

    #[test]
    fn dimension_mismatch_reported_with_line() {
        let (kb, _) = fixtures::fiber_kb();
        let text = kb_to_string(&kb).replacen("\"dimension\":256", "\"dimension\":128", 1);
        assert!(matches!(
            kb_from_str(&text, LoadMode::Strict),
            Err(StoreError::DimensionMismatch { line: 2, expected: 128, found: 256 })
        ));
    }

    #[test]
    fn parse_error_has_offset() {
        let (kb, _) = fixtures::fiber_kb();
        let text = kb_to_string(&kb);
        let header_len = text.find('\n').unwrap() + 1;
        let broken = format!("{}{{oops}}\n{}", &text[..header_len], &text[header_len..]);
        match kb_from_str(&broken, LoadMode::Strict) {
            Err(StoreError::Parse { line: 2, offset, .. }) => assert_eq!(offset, header_len),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn corpus_and_trace_round_trip() {
        let p = fixtures::fiber_problem();
        let text = corpus_to_string(std::slice::from_ref(&p));
        assert_eq!(corpus_from_str(&text).unwrap(), vec![p.clone()]);
        let dup = format!("{text}{}", text.lines().nth(1).unwrap());
        assert!(corpus_from_str(&dup).is_err());

        let (kb, e) = fixtures::fiber_kb();
        let attempt = crate::agent::run_attempt(&p, &kb.view(), &fixtures::fiber_backend(), &e, &Default::default())
            .unwrap();
        let t = trace_to_string(&attempt);
        assert_eq!(trace_from_str(&t).unwrap(), attempt);
        assert_eq!(trace_to_string(&trace_from_str(&t).unwrap()), t);
    }

    #[test]
    fn log_replay_rebuilds_identically() {
        let (mut kb, e) = fixtures::fiber_kb();
        kb.append_dms(&fixtures::fiber_drafts()[1..3], &crate::kb::Provenance::human(3), &e)
            .unwrap();
        let text = kb_to_string(&kb);
        assert_eq!(kb_to_string(&replay_kb_log(&text, &e).unwrap()), text);
        let tampered = text.replacen("Cellulose is dietary fiber", "Starch is dietary fiber", 1);
        assert!(matches!(replay_kb_log(&tampered, &e), Err(StoreError::Replay { revision: 1, .. })));
        assert_eq!(kb_to_string(&kb.at_revision(1).unwrap()), kb_to_string(&fixtures::fiber_kb().0));
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let kb = dir.path().join("kb.jsonl");
        let lock = KbLock::acquire(&kb).unwrap();
        assert!(matches!(KbLock::acquire(&kb), Err(StoreError::Locked { .. })));
        drop(lock);
        assert!(!KbLock::is_locked(&kb));
        KbLock::acquire(&kb).unwrap();
    }

    #[test]
    fn append_only_file_growth() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.jsonl");
        let (mut kb, e) = fixtures::fiber_kb();
        append_kb(&path, &kb, 0).unwrap();
        let before = fs::read_to_string(&path).unwrap();
        kb.append_dms(&fixtures::fiber_drafts()[2..], &crate::kb::Provenance::human(9), &e)
            .unwrap();
        append_kb(&path, &kb, 1).unwrap();
        let after = fs::read_to_string(&path).unwrap();
        assert!(after.starts_with(&before));
        assert_eq!(after, kb_to_string(&kb));
        assert_eq!(load_kb(&path).unwrap(), kb);
    }
}
