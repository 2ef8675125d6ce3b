//! JSON HTTP service over a knowledge base, its run directories and a corpus.
//!
//! Reads always load the committed prefix of the knowledge base file, so they
//! stay available while a compile appends to it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use cac_core::agent::{AttemptResult, Problem};
use cac_core::config::CacConfig;
use cac_core::eval::AblationRun;
use cac_core::kb::{DeclarativeMemory, DmId, DmKind, KnowledgeBase, Provenance, ScoreWeights};
use cac_core::store::{self, KbLock};
use cac_core::teacher::{handle_tool_call, ToolCall, ToolResult};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use crate::runs::{self, AblationTarget, RunDir, SolveSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApiErrorCode {
    NotFound,
    Validation,
    Conflict,
    BackendUnavailable,
}

/// Body of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: ApiErrorCode,
    pub message: String,
    #[serde(default)]
    pub detail: Map<String, Value>,
}

impl ApiError {
    pub fn new(code: ApiErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
            detail: Map::new(),
        }
    }

    fn with(mut self, key: &str, value: impl Serialize) -> Self {
        self.detail
            .insert(key.into(), serde_json::to_value(value).expect("detail serializes"));
        self
    }

    fn not_found(what: impl Into<String>) -> Self {
        Self::new(ApiErrorCode::NotFound, what)
    }

    fn validation(what: impl Into<String>) -> Self {
        Self::new(ApiErrorCode::Validation, what)
    }

    pub fn status(&self) -> StatusCode {
        match self.code {
            ApiErrorCode::NotFound => StatusCode::NOT_FOUND,
            ApiErrorCode::Validation => StatusCode::BAD_REQUEST,
            ApiErrorCode::Conflict => StatusCode::CONFLICT,
            ApiErrorCode::BackendUnavailable => StatusCode::SERVICE_UNAVAILABLE,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(self)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Queued,
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub status: RunStatus,
    pub problem_id: String,
    pub removed_dm_ids: Vec<DmId>,
    pub backend_profile: String,
    /// Set when no DMs were removed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<AttemptResult>,
    /// Set when DMs were removed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationRun>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ApiError>,
}

pub struct AppState {
    pub cfg: CacConfig,
    pub kb_path: PathBuf,
    pub out: PathBuf,
    pub corpus: Option<PathBuf>,
    runs: Mutex<BTreeMap<String, RunRecord>>,
    profile_locks: Mutex<BTreeMap<String, Arc<Mutex<()>>>>,
    counter: AtomicU64,
}

pub const DEFAULT_PROFILE: &str = "default";

impl AppState {
    pub fn new(cfg: CacConfig) -> Self {
        Self {
            kb_path: cfg.paths.kb.clone(),
            out: cfg.paths.out.clone(),
            corpus: cfg.paths.corpus.clone(),
            cfg,
            runs: Mutex::new(BTreeMap::new()),
            profile_locks: Mutex::new(BTreeMap::new()),
            counter: AtomicU64::new(0),
        }
    }

    fn profile_path(&self, name: &str) -> Option<PathBuf> {
        match self.cfg.backends.profiles.get(name) {
            Some(p) => Some(p.clone()),
            None if name == DEFAULT_PROFILE => self.cfg.backends.agent.clone(),
            None => None,
        }
    }

    fn load_kb(&self) -> Result<KnowledgeBase, ApiError> {
        if !self.kb_path.exists() {
            return Ok(KnowledgeBase::new(self.cfg.embedder.clone()));
        }
        store::load_kb_committed(&self.kb_path)
            .map_err(|e| ApiError::validation(format!("knowledge base unreadable: {e}")))
    }

    fn load_problems(&self) -> Result<Vec<Problem>, ApiError> {
        match &self.corpus {
            None => Ok(Vec::new()),
            Some(p) => runs::load_corpus(p).map_err(|e| ApiError::validation(e.to_string())),
        }
    }

    fn set_run(&self, record: RunRecord) {
        self.runs
            .lock()
            .expect("run table poisoned")
            .insert(record.run_id.clone(), record);
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(ApiErrorCode::BackendUnavailable, format!("worker failed: {e}")))?
}

fn param<T: std::str::FromStr>(q: &HashMap<String, String>, name: &str) -> Result<Option<T>, ApiError> {
    match q.get(name) {
        None => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|_| ApiError::validation(format!("query parameter `{name}` is invalid")).with("value", v)),
    }
}

/// A DM without its embedding keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmSummary {
    pub id: DmId,
    pub seq: u64,
    pub kind: DmKind,
    pub description: String,
    pub goal_condition: String,
    pub wm_condition: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub kc_tags: Vec<String>,
    pub provenance: Provenance,
}

impl From<&DeclarativeMemory> for DmSummary {
    fn from(dm: &DeclarativeMemory) -> Self {
        Self {
            id: dm.id.clone(),
            seq: dm.seq,
            kind: dm.kind,
            description: dm.description.clone(),
            goal_condition: dm.goal_condition.clone(),
            wm_condition: dm.wm_condition.clone(),
            kc_tags: dm.kc_tags.clone(),
            provenance: dm.provenance.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbPage {
    pub items: Vec<DmSummary>,
    pub total: usize,
    pub revision: u64,
    pub offset: usize,
    pub limit: usize,
    /// DM count after each revision.
    pub commits: Vec<usize>,
}

const MAX_LIMIT: usize = 1000;

async fn get_kb(State(s): State<Arc<AppState>>, Query(q): Query<HashMap<String, String>>) -> ApiResult<KbPage> {
    let limit = param::<usize>(&q, "limit")?.unwrap_or(100).min(MAX_LIMIT);
    let offset = param::<usize>(&q, "offset")?.unwrap_or(0);
    let revision = param::<u64>(&q, "revision")?;
    blocking(move || {
        let kb = s.load_kb()?;
        let revision = revision.unwrap_or(kb.revision());
        let view = kb
            .view_at(revision)
            .map_err(|e| ApiError::validation(e.to_string()))?;
        Ok(Json(KbPage {
            items: view.iter().skip(offset).take(limit).map(DmSummary::from).collect(),
            total: view.len(),
            revision,
            offset,
            limit,
            commits: kb.commits()[..revision as usize].to_vec(),
        }))
    })
    .await
}

async fn get_dm(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<DeclarativeMemory> {
    blocking(move || {
        let kb = s.load_kb()?;
        kb.get(&DmId::new(id.as_str()))
            .cloned()
            .map(Json)
            .ok_or_else(|| ApiError::not_found(format!("no DM `{id}`")).with("id", &id))
    })
    .await
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceListing {
    pub run_id: String,
    pub mode: String,
    pub started_at: u64,
    pub traces: Vec<String>,
}

fn list_runs(out: &Path) -> Vec<TraceListing> {
    let Ok(entries) = std::fs::read_dir(out) else {
        return Vec::new();
    };
    let mut listings: Vec<TraceListing> = entries
        .filter_map(Result::ok)
        .filter_map(|e| {
            let manifest = store::RunManifest::load(&e.path().join("manifest.json")).ok()?;
            let mut traces: Vec<String> = std::fs::read_dir(e.path().join("traces"))
                .map(|d| {
                    d.filter_map(Result::ok)
                        .filter_map(|t| {
                            t.file_name()
                                .to_string_lossy()
                                .strip_suffix(".jsonl")
                                .map(str::to_owned)
                        })
                        .collect()
                })
                .unwrap_or_default();
            traces.sort();
            Some(TraceListing {
                run_id: e.file_name().to_string_lossy().into_owned(),
                mode: manifest.mode,
                started_at: manifest.started_at,
                traces,
            })
        })
        .collect();
    listings.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    listings
}

async fn get_traces(State(s): State<Arc<AppState>>) -> ApiResult<Value> {
    blocking(move || Ok(Json(json!({ "items": list_runs(&s.out) })))).await
}

fn safe_name(name: &str) -> bool {
    !name.is_empty() && !name.starts_with('.') && !name.contains(['/', '\\'])
}

async fn get_trace(
    State(s): State<Arc<AppState>>,
    UrlPath((run, problem)): UrlPath<(String, String)>,
) -> ApiResult<AttemptResult> {
    blocking(move || {
        let path = s.out.join(&run).join(RunDir::trace_rel(&problem));
        if !safe_name(&run) || !safe_name(&problem) || !path.exists() {
            return Err(ApiError::not_found(format!("no trace `{problem}` in run `{run}`"))
                .with("run", &run)
                .with("problem", &problem));
        }
        store::load_trace(&path)
            .map(Json)
            .map_err(|e| ApiError::validation(format!("trace unreadable: {e}")))
    })
    .await
}

async fn get_problems(State(s): State<Arc<AppState>>) -> ApiResult<Value> {
    blocking(move || Ok(Json(json!({ "items": s.load_problems()? })))).await
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRequest {
    pub problem_id: String,
    #[serde(default)]
    pub removed_dm_ids: Vec<String>,
    #[serde(default)]
    pub backend_profile: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAccepted {
    pub run_id: String,
    pub status: RunStatus,
}

async fn post_run(State(s): State<Arc<AppState>>, body: Bytes) -> Result<(StatusCode, Json<RunAccepted>), ApiError> {
    let req: RunRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::validation(format!("invalid run request: {e}")))?;
    let state = s.clone();
    let (record, problem, profile_path) = blocking(move || {
        let s = state;
        if KbLock::is_locked(&s.kb_path) {
            return Err(ApiError::new(
                ApiErrorCode::Conflict,
                "a compile run holds the knowledge base writer lock",
            )
            .with("kb", s.kb_path.display().to_string()));
        }
        let problem = s
            .load_problems()?
            .into_iter()
            .find(|p| p.id == req.problem_id)
            .ok_or_else(|| ApiError::not_found(format!("no problem `{}`", req.problem_id)).with("problem_id", &req.problem_id))?;
        let kb = s.load_kb()?;
        let removed: BTreeSet<DmId> = req.removed_dm_ids.iter().map(|i| DmId::new(i.as_str())).collect();
        let unknown: Vec<&DmId> = removed.iter().filter(|id| kb.get(id).is_none()).collect();
        if !unknown.is_empty() {
            return Err(ApiError::validation("unknown DM ids").with("unknown_ids", unknown));
        }
        let profile = req.backend_profile.clone().unwrap_or_else(|| DEFAULT_PROFILE.into());
        let path = s
            .profile_path(&profile)
            .ok_or_else(|| ApiError::validation(format!("no backend profile `{profile}`")).with("backend_profile", &profile))?;
        let n = s.counter.fetch_add(1, Ordering::SeqCst) + 1;
        let run_id = format!("api-{}-{n}", runs::now_secs());
        Ok((
            RunRecord {
                run_id,
                status: RunStatus::Queued,
                problem_id: problem.id.clone(),
                removed_dm_ids: removed.into_iter().collect(),
                backend_profile: profile,
                result: None,
                ablation: None,
                error: None,
            },
            problem,
            path,
        ))
    })
    .await?;
    s.set_run(record.clone());
    let accepted = RunAccepted {
        run_id: record.run_id.clone(),
        status: RunStatus::Queued,
    };
    tokio::task::spawn_blocking(move || execute_run(&s, record, problem, &profile_path));
    Ok((StatusCode::ACCEPTED, Json(accepted)))
}

fn execute_run(s: &AppState, mut record: RunRecord, problem: Problem, profile_path: &Path) {
    let lock = {
        let mut locks = s.profile_locks.lock().expect("profile locks poisoned");
        locks.entry(record.backend_profile.clone()).or_default().clone()
    };
    let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
    record.status = RunStatus::Running;
    s.set_run(record.clone());
    let outcome = (|| -> Result<(), ApiError> {
        let backend = crate::profiles::load_agent(profile_path).map_err(|e| {
            ApiError::new(ApiErrorCode::BackendUnavailable, e).with("backend_profile", &record.backend_profile)
        })?;
        let kb = s.load_kb()?;
        let run = RunDir::create(&s.out, &record.run_id).map_err(|e| ApiError::validation(e.to_string()))?;
        let fail = |e: runs::CliError| ApiError::validation(e.to_string());
        if record.removed_dm_ids.is_empty() {
            let spec = SolveSpec {
                problems: vec![problem.clone()],
                kb_path: Some(s.kb_path.clone()),
                corpus_path: s.corpus.clone(),
                revision: None,
                removed: Vec::new(),
            };
            let out = runs::solve(&s.cfg, run, &spec, &kb, backend.backend.as_ref(), runs::now_secs()).map_err(fail)?;
            record.result = out.attempts.into_iter().next();
        } else {
            let ids = record.removed_dm_ids.iter().map(|d| d.to_string()).collect();
            let (_, ablation) = runs::ablate(
                &s.cfg,
                run,
                &problem,
                Some(&s.kb_path),
                &kb,
                &AblationTarget::Ids(ids),
                backend.backend.as_ref(),
                runs::now_secs(),
            )
            .map_err(fail)?;
            record.ablation = Some(ablation);
        }
        Ok(())
    })();
    match outcome {
        Ok(()) => record.status = RunStatus::Succeeded,
        Err(e) => {
            record.status = RunStatus::Failed;
            record.error = Some(e);
        }
    }
    s.set_run(record);
}

async fn get_run(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<RunRecord> {
    s.runs
        .lock()
        .expect("run table poisoned")
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("no run `{id}`")).with("run_id", &id))
}

/// The retrieval preview shared by `GET /api/retrieve` and
/// `cac inspect --retrieve`.
pub fn retrieve_preview(
    kb: &KnowledgeBase,
    revision: Option<u64>,
    goal: &str,
    wm: &str,
    k: usize,
    weights: ScoreWeights,
) -> Result<Value, ApiError> {
    if goal.trim().is_empty() {
        return Err(ApiError::validation("`goal` must be non-empty"));
    }
    if k == 0 {
        return Err(ApiError::validation("`k` must be at least 1"));
    }
    let view = kb
        .view_at(revision.unwrap_or(kb.revision()))
        .map_err(|e| ApiError::validation(e.to_string()))?;
    let embedder = crate::profiles::build_embedder(kb.embedder_config())
        .map_err(|e| ApiError::new(ApiErrorCode::BackendUnavailable, e))?;
    let call = ToolCall::RetrievePreview {
        goal_text: goal.to_owned(),
        wm_text: wm.to_owned(),
        k,
    };
    match handle_tool_call(&view, &call, embedder.as_ref(), weights) {
        ToolResult::Preview { items } => Ok(json!({ "items": items, "revision": view.base_revision() })),
        ToolResult::Error { message } => Err(ApiError::new(ApiErrorCode::BackendUnavailable, message)),
        other => unreachable!("preview call returned {other:?}"),
    }
}

async fn get_retrieve(State(s): State<Arc<AppState>>, Query(q): Query<HashMap<String, String>>) -> ApiResult<Value> {
    let goal = q.get("goal").cloned().unwrap_or_default();
    let wm = q.get("wm").cloned().unwrap_or_default();
    let k = param::<usize>(&q, "k")?.unwrap_or(5);
    let revision = param::<u64>(&q, "revision")?;
    blocking(move || retrieve_preview(&s.load_kb()?, revision, &goal, &wm, k, s.cfg.agent.weights).map(Json)).await
}

async fn not_found() -> ApiError {
    ApiError::not_found("no such endpoint")
}

async fn method_not_allowed() -> Response {
    let mut r = ApiError::validation("method not allowed").into_response();
    *r.status_mut() = StatusCode::METHOD_NOT_ALLOWED;
    r
}

pub fn router(state: Arc<AppState>, ui_dir: Option<&Path>) -> Router {
    let origin = match &state.cfg.server.ui_origin {
        Some(o) => match HeaderValue::from_str(o) {
            Ok(v) => AllowOrigin::exact(v),
            Err(_) => AllowOrigin::from(Any),
        },
        None => AllowOrigin::from(Any),
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    let mut app = Router::new()
        .route("/api/kb", get(get_kb))
        .route("/api/kb/{id}", get(get_dm))
        .route("/api/traces", get(get_traces))
        .route("/api/traces/{run}/{problem}", get(get_trace))
        .route("/api/problems", get(get_problems))
        .route("/api/runs", axum::routing::post(post_run))
        .route("/api/runs/{id}", get(get_run))
        .route("/api/retrieve", get(get_retrieve));
    if let Some(dir) = ui_dir {
        app = app.nest_service("/ui", tower_http::services::ServeDir::new(dir));
    }
    app.fallback(not_found)
        .method_not_allowed_fallback(method_not_allowed)
        .layer(cors)
        .with_state(state)
}

/// A server running on its own thread and runtime.
pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Binds `addr` (port 0 picks a free port) and serves in the background.
pub fn spawn(app: Router, addr: SocketAddr) -> std::io::Result<ServerHandle> {
    let listener = std::net::TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .build()
            .expect("tokio runtime");
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).expect("listener");
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
    });
    Ok(ServerHandle {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

/// Serves until the process is stopped.
pub fn serve_forever(app: Router, addr: SocketAddr) -> std::io::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, app).await
    })
}
