//! Command-line parsing and dispatch for `cac`.

use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use cac_core::config::CacConfig;
use cac_core::eval::Verdict;
use cac_core::fixtures;
use cac_core::kb::DmId;
use cac_core::store;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::profiles;
use crate::runs::{self, AblationTarget, CliError, RunDir, SolveSpec};
use crate::server;

#[derive(Debug, Parser)]
#[command(name = "cac", version, about = "Compile, run and inspect cognitive agents backed by declarative memory")]
pub struct Cli {
    /// TOML configuration file; `CAC_*` environment variables override it and
    /// flags override both.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compile a corpus into the knowledge base with a teacher.
    Compile(CompileArgs),
    /// Run the agent on problems against the knowledge base.
    Solve(SolveArgs),
    /// Re-run one problem with DMs removed and classify the change.
    Ablate(AblateArgs),
    /// Measure how target rank degrades as distractor DMs are added.
    ProbeFan(ProbeArgs),
    /// Show knowledge base contents or preview a retrieval.
    Inspect(InspectArgs),
    /// Serve the JSON HTTP API.
    Serve(ServeArgs),
    /// Re-execute a recorded run offline and compare its outputs byte for byte.
    Replay(ReplayArgs),
    /// Write bundled fixture inputs (knowledge base, corpus, scripted backends).
    Fixture(FixtureArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Output directory for run directories.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Run directory name (default: <mode>-<timestamp>-<pid>).
    #[arg(long)]
    pub run_id: Option<String>,
    /// Run start time in seconds since the epoch, for reproducible outputs.
    #[arg(long, value_name = "SECS")]
    pub timestamp: Option<u64>,
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Knowledge base file.
    #[arg(long, value_name = "FILE")]
    pub kb: Option<PathBuf>,
    /// Problem corpus (default: config, then corpus.jsonl beside the KB).
    #[arg(long, value_name = "FILE")]
    pub corpus: Option<PathBuf>,
    /// Agent backend profile.
    #[arg(long, value_name = "FILE")]
    pub backend: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompileArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Teacher backend profile.
    #[arg(long, value_name = "FILE")]
    pub teacher: Option<PathBuf>,
    /// Compile only these problems (repeatable; default: whole corpus).
    #[arg(long = "problem", value_name = "ID")]
    pub problems: Vec<String>,
    #[arg(long)]
    pub max_iterations: Option<u32>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Problems to solve (repeatable; default: whole corpus).
    #[arg(long = "problem", value_name = "ID")]
    pub problems: Vec<String>,
    /// Solve against this committed revision instead of the latest.
    #[arg(long)]
    pub revision: Option<u64>,
    /// DMs to hide, as comma-separated ids or @file.
    #[arg(long, value_name = "IDS")]
    pub remove: Option<String>,
    /// Print each AttemptResult as one JSON line.
    #[arg(long)]
    pub json: bool,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, value_name = "ID")]
    pub problem: String,
    /// DMs to remove, as comma-separated ids or @file.
    #[arg(long, value_name = "IDS", required_unless_present = "top_retrieved", conflicts_with = "top_retrieved")]
    pub remove: Option<String>,
    /// Remove every DM the base attempt retrieved (a heuristic selector).
    #[arg(long)]
    pub top_retrieved: bool,
    #[arg(long)]
    pub json: bool,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub max_distractors: Option<usize>,
    #[arg(long)]
    pub step: Option<usize>,
    /// Distractors share no cue tokens with the query.
    #[arg(long)]
    pub zero_overlap: bool,
    /// Also write the rank curve as CSV here.
    #[arg(long, value_name = "FILE")]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long, value_name = "FILE")]
    pub kb: Option<PathBuf>,
    #[arg(long)]
    pub revision: Option<u64>,
    /// Print one DM.
    #[arg(long, value_name = "ID", conflicts_with = "retrieve")]
    pub dm: Option<String>,
    /// Preview retrieval for a hypothetical goal and working memory.
    #[arg(long, requires = "goal")]
    pub retrieve: bool,
    #[arg(long)]
    pub goal: Option<String>,
    #[arg(long, default_value = "")]
    pub wm: String,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Print the same JSON the HTTP API returns.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, value_name = "FILE")]
    pub kb: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Default agent profile for POST /api/runs.
    #[arg(long, value_name = "FILE")]
    pub backend: Option<PathBuf>,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    /// Static files to serve under /ui.
    #[arg(long, value_name = "DIR")]
    pub ui: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Run id under the output directory, or a run directory path.
    #[arg(long)]
    pub run: String,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FixtureKind {
    /// Four-DM knowledge base, one problem and a scripted agent.
    Fiber,
    /// Synthetic corpus with scripted agent and teacher.
    Corpus,
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    pub kind: FixtureKind,
    #[arg(long, value_name = "DIR")]
    pub dir: PathBuf,
    /// Corpus: teacher turns each problem needs, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "0,1,3")]
    pub turns: Vec<usize>,
}

/// Parses `argv` and runs it, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32, CliError> {
    let cfg = CacConfig::load(cli.config.as_deref()).map_err(|e| CliError::Config(e.to_string()))?;
    match cli.command {
        Command::Compile(a) => compile(cfg, a),
        Command::Solve(a) => solve(cfg, a),
        Command::Ablate(a) => ablate(cfg, a),
        Command::ProbeFan(a) => probe(cfg, a),
        Command::Inspect(a) => inspect(cfg, a),
        Command::Serve(a) => serve(cfg, a),
        Command::Replay(a) => replay(cfg, a),
        Command::Fixture(a) => fixture(a),
    }
}

fn out(text: &str) {
    let mut stdout = std::io::stdout().lock();
    let _ = stdout.write_all(text.as_bytes());
    let _ = stdout.flush();
}

fn kb_path(cfg: &CacConfig, flag: Option<PathBuf>) -> PathBuf {
    flag.unwrap_or_else(|| cfg.paths.kb.clone())
}

fn corpus_path(cfg: &CacConfig, flag: Option<PathBuf>, kb: &Path) -> PathBuf {
    flag.or_else(|| cfg.paths.corpus.clone())
        .unwrap_or_else(|| kb.parent().unwrap_or(Path::new("")).join("corpus.jsonl"))
}

fn agent_profile(cfg: &CacConfig, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
    flag.or_else(|| cfg.backends.agent.clone())
        .ok_or_else(|| CliError::Usage("no agent backend: pass --backend or set backends.agent".into()))
}

fn new_run(cfg: &CacConfig, args: &RunArgs, mode: &str) -> Result<(RunDir, u64), CliError> {
    let started_at = args.timestamp.unwrap_or_else(runs::now_secs);
    let dir = args.out.clone().unwrap_or_else(|| cfg.paths.out.clone());
    let id = args
        .run_id
        .clone()
        .unwrap_or_else(|| runs::default_run_id(mode, started_at));
    Ok((RunDir::create(&dir, &id)?, started_at))
}

/// `a,b,c` or `@file` with ids separated by commas or whitespace.
fn parse_ids(spec: &str) -> Result<Vec<String>, CliError> {
    let text = match spec.strip_prefix('@') {
        Some(path) => std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{path}: {e}")))?,
        None => spec.to_owned(),
    };
    Ok(text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect())
}

fn compile(mut cfg: CacConfig, a: CompileArgs) -> Result<i32, CliError> {
    if let Some(n) = a.max_iterations {
        cfg.compile.max_iterations = n;
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    }
    let kb = kb_path(&cfg, a.input.kb);
    let corpus = corpus_path(&cfg, a.input.corpus, &kb);
    let problems = runs::pick_problems(&runs::load_corpus(&corpus)?, &a.problems)?;
    let backend = profiles::load_agent(&agent_profile(&cfg, a.input.backend)?).map_err(CliError::Config)?;
    let teacher_path = a
        .teacher
        .or_else(|| cfg.backends.teacher.clone())
        .ok_or_else(|| CliError::Usage("no teacher backend: pass --teacher or set backends.teacher".into()))?;
    let teacher = profiles::load_teacher(&teacher_path).map_err(CliError::Config)?;
    let (run, started_at) = new_run(&cfg, &a.run, "compile")?;
    let result = runs::compile(
        &cfg,
        run,
        &problems,
        &kb,
        Some(&corpus),
        backend.backend.as_ref(),
        teacher.backend.as_ref(),
        started_at,
    )?;
    out(&result.stats.to_table());
    out(&format!("run {} ({})\n", result.run.id, result.run.root.display()));
    if result.all_compiled {
        Ok(0)
    } else {
        eprintln!(
            "error: {} of {} problems were not compiled within the iteration cap",
            result.stats.problems_attempted - result.stats.problems_compiled,
            result.stats.problems_attempted
        );
        Ok(1)
    }
}

fn solve(cfg: CacConfig, a: SolveArgs) -> Result<i32, CliError> {
    let kb_file = kb_path(&cfg, a.input.kb);
    let corpus = corpus_path(&cfg, a.input.corpus, &kb_file);
    let problems = runs::pick_problems(&runs::load_corpus(&corpus)?, &a.problems)?;
    let kb = runs::open_kb(&kb_file, &cfg)?;
    let backend = profiles::load_agent(&agent_profile(&cfg, a.input.backend)?).map_err(CliError::Config)?;
    let removed = a.remove.as_deref().map(parse_ids).transpose()?.unwrap_or_default();
    let (run, started_at) = new_run(&cfg, &a.run, "solve")?;
    let spec = SolveSpec {
        problems,
        kb_path: Some(kb_file),
        corpus_path: Some(corpus),
        revision: a.revision,
        removed,
    };
    let result = runs::solve(&cfg, run, &spec, &kb, backend.backend.as_ref(), started_at)?;
    for attempt in &result.attempts {
        if a.json {
            out(&format!("{}\n", serde_json::to_string(attempt).expect("serializable")));
        } else {
            out(&format!(
                "{}: {:?} (predicted {}) in {} steps, trace {}\n",
                attempt.problem_id,
                attempt.outcome,
                attempt.predicted_letter.as_deref().unwrap_or("-"),
                attempt.history.len(),
                result.run.path(&RunDir::trace_rel(&attempt.problem_id)).display()
            ));
        }
    }
    if !a.json {
        out(&format!("run {} ({})\n", result.run.id, result.run.root.display()));
    }
    Ok(if runs::solve_failed(&result.attempts) { 1 } else { 0 })
}

fn ablate(cfg: CacConfig, a: AblateArgs) -> Result<i32, CliError> {
    let kb_file = kb_path(&cfg, a.input.kb);
    let corpus = corpus_path(&cfg, a.input.corpus, &kb_file);
    let problem = runs::pick_problems(&runs::load_corpus(&corpus)?, std::slice::from_ref(&a.problem))?
        .pop()
        .expect("one problem picked");
    let kb = runs::open_kb(&kb_file, &cfg)?;
    let backend = profiles::load_agent(&agent_profile(&cfg, a.input.backend)?).map_err(CliError::Config)?;
    let target = match a.remove {
        Some(spec) => AblationTarget::Ids(parse_ids(&spec)?),
        None => AblationTarget::TopRetrieved,
    };
    let (run, started_at) = new_run(&cfg, &a.run, "ablate")?;
    let (run, result) = runs::ablate(
        &cfg,
        run,
        &problem,
        Some(&kb_file),
        &kb,
        &target,
        backend.backend.as_ref(),
        started_at,
    )?;
    let r = &result.report;
    if a.json {
        out(&format!("{}\n", serde_json::to_string(r).expect("serializable")));
    } else {
        let removed: Vec<&str> = r.removed_ids.iter().map(DmId::as_str).collect();
        out(&format!(
            "problem      {}\nrevision     {}\nremoved      {}\nbase         {:?}\nablated      {:?}\nverdict      {}\ndivergence   {}\nrun          {} ({})\n",
            r.problem_id,
            r.kb_revision,
            removed.join(", "),
            r.base_outcome,
            r.ablated_outcome,
            match r.verdict {
                Verdict::KnowledgeDependent => "knowledge_dependent",
                Verdict::PriorKnowledgeSuspect => "prior_knowledge_suspect",
                Verdict::Inconclusive => "inconclusive",
            },
            r.divergence_index.map(|i| format!("step {i}")).unwrap_or_else(|| "none".into()),
            run.id,
            run.root.display()
        ));
    }
    Ok(0)
}

fn probe(mut cfg: CacConfig, a: ProbeArgs) -> Result<i32, CliError> {
    if let Some(n) = a.max_distractors {
        cfg.probe.max_distractors = n;
    }
    if let Some(n) = a.step {
        cfg.probe.step = n;
    }
    if a.zero_overlap {
        cfg.probe.shared_cues = Some(0);
        cfg.probe.avoid_query_overlap = true;
    }
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let probe_cfg = cfg.probe.clone();
    let (run, started_at) = new_run(&cfg, &a.run, "probe")?;
    let (run, report) = runs::probe_fan(&cfg, run, &probe_cfg, started_at)?;
    if let Some(path) = &a.csv {
        store::write_atomic(path, &report.to_csv()).map_err(|e| CliError::Domain(e.to_string()))?;
    }
    if a.json {
        out(&format!("{}\n", serde_json::to_string(&report).expect("serializable")));
    } else {
        out(&report.to_table());
        out(&format!("run {} ({})\n", run.id, run.root.display()));
    }
    Ok(0)
}

fn inspect(cfg: CacConfig, a: InspectArgs) -> Result<i32, CliError> {
    let kb_file = kb_path(&cfg, a.kb);
    let kb = runs::open_kb(&kb_file, &cfg)?;
    if a.retrieve {
        let goal = a.goal.unwrap_or_default();
        let value = server::retrieve_preview(&kb, a.revision, &goal, &a.wm, a.k, cfg.agent.weights)
            .map_err(|e| CliError::Usage(e.message))?;
        if a.json {
            out(&format!("{}\n", serde_json::to_string(&value).expect("serializable")));
        } else {
            for item in value["items"].as_array().into_iter().flatten() {
                out(&format!(
                    "{:>3} {:<10} {:.6}  {}\n",
                    item["rank"],
                    item["id"].as_str().unwrap_or(""),
                    item["score"].as_f64().unwrap_or(f64::NAN),
                    item["description"].as_str().unwrap_or("")
                ));
            }
        }
        return Ok(0);
    }
    if let Some(id) = a.dm {
        let dm = kb
            .get(&DmId::new(id.as_str()))
            .ok_or_else(|| CliError::Usage(format!("no DM `{id}`")))?;
        out(&format!("{}\n", serde_json::to_string_pretty(dm).expect("serializable")));
        return Ok(0);
    }
    let revision = a.revision.unwrap_or(kb.revision());
    let view = kb.view_at(revision).map_err(|e| CliError::Usage(e.to_string()))?;
    if a.json {
        let items: Vec<server::DmSummary> = view.iter().map(server::DmSummary::from).collect();
        let value = serde_json::json!({ "items": items, "total": view.len(), "revision": revision });
        out(&format!("{}\n", serde_json::to_string(&value).expect("serializable")));
        return Ok(0);
    }
    out(&format!("{}: revision {revision}, {} DMs\n", kb_file.display(), view.len()));
    for dm in view.iter() {
        out(&format!("{:<10} {:<11} {}\n", dm.id.as_str(), format!("{:?}", dm.kind), dm.description));
    }
    Ok(0)
}

fn serve(mut cfg: CacConfig, a: ServeArgs) -> Result<i32, CliError> {
    if let Some(p) = a.kb {
        cfg.paths.kb = p;
    }
    if let Some(p) = a.corpus {
        cfg.paths.corpus = Some(p);
    }
    if let Some(p) = a.out {
        cfg.paths.out = p;
    }
    if let Some(p) = a.backend {
        cfg.backends.agent = Some(p);
    }
    if let Some(h) = a.host {
        cfg.server.host = h;
    }
    if let Some(p) = a.port {
        cfg.server.port = p;
    }
    if cfg.paths.kb.exists() {
        store::load_kb_committed(&cfg.paths.kb).map_err(|e| CliError::Config(e.to_string()))?;
    }
    let addr: SocketAddr = format!("{}:{}", cfg.server.host, cfg.server.port)
        .parse()
        .map_err(|e| CliError::Config(format!("server address: {e}")))?;
    let app = server::router(Arc::new(server::AppState::new(cfg)), a.ui.as_deref());
    server::serve_forever(app, addr).map_err(|e| CliError::Domain(e.to_string()))?;
    Ok(0)
}

fn replay(cfg: CacConfig, a: ReplayArgs) -> Result<i32, CliError> {
    let dir = a.out.unwrap_or_else(|| cfg.paths.out.clone());
    let run = RunDir::locate(&dir, &a.run)?;
    let report = runs::replay(&run)?;
    for rel in &report.compared {
        let status = if report.mismatched.contains(rel) { "DIFFERS" } else { "identical" };
        out(&format!("{status:<9} {rel}\n"));
    }
    for m in report.mismatched.iter().filter(|m| !report.compared.contains(m)) {
        out(&format!("DIFFERS   {m}\n"));
    }
    if report.identical() {
        Ok(0)
    } else {
        eprintln!("error: replay of {} did not reproduce the recorded outputs", run.id);
        Ok(1)
    }
}

fn fixture(a: FixtureArgs) -> Result<i32, CliError> {
    let write = |name: &str, text: &str| -> Result<(), CliError> {
        let path = a.dir.join(name);
        store::write_atomic(&path, text).map_err(|e| CliError::Domain(e.to_string()))?;
        out(&format!("wrote {}\n", path.display()));
        Ok(())
    };
    match a.kind {
        FixtureKind::Fiber => {
            let (kb, _) = fixtures::fiber_kb();
            write("kb.jsonl", &store::kb_to_string(&kb))?;
            write("corpus.jsonl", &store::corpus_to_string(&[fixtures::fiber_problem()]))?;
            write("scripted.toml", &fixtures::fiber_table().to_toml())?;
        }
        FixtureKind::Corpus => {
            let c = fixtures::scripted_corpus(&a.turns);
            write("corpus.jsonl", &store::corpus_to_string(&c.problems))?;
            write("agent.toml", &c.agent_table.to_toml())?;
            let teacher = toml::to_string(&c.teacher_table).map_err(|e| CliError::Domain(e.to_string()))?;
            write("teacher.toml", &teacher)?;
        }
    }
    Ok(0)
}
