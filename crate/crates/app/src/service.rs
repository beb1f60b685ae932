//! HTTP JSON API over authoring sessions.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{middleware, Json, Router};
use clauserec_core::corpus::normalize_label;
use clauserec_core::relevance::Method;
use clauserec_core::retriever::Variant;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::artifacts::write_atomic;
use crate::error::{AppError, AppResult};
use crate::models::{GeneratedView, Models, RetrievedView, TypeRelevance};
use crate::session::{LogEntry, Mutation, Session, SessionError};

pub const FINGERPRINT_HEADER: &str = "x-config-fingerprint";

pub struct AppState {
    pub models: Arc<Models>,
    sessions: Mutex<BTreeMap<String, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
}

#[derive(Serialize, Deserialize)]
struct SnapshotLine {
    id: String,
    log: Vec<LogEntry>,
}

impl AppState {
    pub fn new(models: Models) -> Self {
        Self::shared(Arc::new(models))
    }

    /// A fresh session table over models another state may also hold.
    pub fn shared(models: Arc<Models>) -> Self {
        AppState {
            models,
            sessions: Mutex::new(BTreeMap::new()),
            next_id: AtomicU64::new(1),
        }
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions
            .lock()
            .expect("session table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id:?}")))
    }

    fn insert(&self, session: Session) {
        self.sessions
            .lock()
            .expect("session table poisoned")
            .insert(session.id().to_string(), Arc::new(Mutex::new(session)));
    }

    /// Restores sessions by replaying their logs.
    pub fn load_snapshot(&self, path: &Path) -> AppResult<usize> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(0),
            Err(e) => return Err(AppError::io(path, e)),
        };
        let mut n = 0;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let snap: SnapshotLine = serde_json::from_str(line).map_err(|e| AppError::BadArtifact {
                path: path.to_path_buf(),
                source: e,
            })?;
            let session = Session::replay(&snap.id, &self.models.types, &snap.log)
                .map_err(|e| AppError::Input(format!("cannot replay session {}: {e}", snap.id)))?;
            if let Some(num) = snap.id.strip_prefix('s').and_then(|s| s.parse::<u64>().ok()) {
                self.next_id.fetch_max(num + 1, Ordering::SeqCst);
            }
            self.insert(session);
            n += 1;
        }
        Ok(n)
    }

    pub fn save_snapshot(&self, path: &Path) -> AppResult<usize> {
        let table = self.sessions.lock().expect("session table poisoned");
        let mut out = String::new();
        for s in table.values() {
            let s = s.lock().expect("session poisoned");
            let line = SnapshotLine {
                id: s.id().to_string(),
                log: s.log.clone(),
            };
            out.push_str(&serde_json::to_string(&line).expect("log serializes"));
            out.push('\n');
        }
        write_atomic(path, out.as_bytes())?;
        Ok(table.len())
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    current_revision: Option<u64>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
            current_revision: None,
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::Conflict { current, .. } => ApiError {
                status: StatusCode::CONFLICT,
                message: e.to_string(),
                current_revision: Some(current),
            },
            other => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, other.to_string()),
        }
    }
}

impl From<clauserec_core::Error> for ApiError {
    fn from(e: clauserec_core::Error) -> Self {
        use clauserec_core::Error as E;
        let status = match e {
            E::UnknownClauseType(_) | E::EmptyContract(_) | E::ZeroVector | E::InvalidArgument(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            E::EncoderTimeout(_) | E::EncoderTransport(_) | E::EncoderProtocol(_) => StatusCode::BAD_GATEWAY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if let Some(r) = self.current_revision {
            body["current_revision"] = json!(r);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Serialize)]
pub struct ClauseView {
    pub index: usize,
    #[serde(rename = "type")]
    pub label: String,
    pub text: String,
}

#[derive(Serialize)]
pub struct SessionView {
    pub id: String,
    pub revision: u64,
    pub config_fingerprint: String,
    pub clauses: Vec<ClauseView>,
    pub present_types: Vec<String>,
}

fn view(state: &AppState, s: &Session) -> SessionView {
    let types = &state.models.types;
    SessionView {
        id: s.id().to_string(),
        revision: s.revision,
        config_fingerprint: state.models.fingerprint.clone(),
        clauses: s
            .contract
            .clauses
            .iter()
            .enumerate()
            .map(|(index, c)| ClauseView {
                index,
                label: types.label(c.kind).to_string(),
                text: c.text.clone(),
            })
            .collect(),
        present_types: s
            .contract
            .type_set()
            .into_iter()
            .map(|t| types.label(t).to_string())
            .collect(),
    }
}

#[derive(Deserialize)]
struct NewClause {
    #[serde(alias = "type")]
    label: String,
    text: String,
}

#[derive(Deserialize, Default)]
struct CreateBody {
    #[serde(default)]
    clauses: Vec<NewClause>,
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> Result<(StatusCode, Json<SessionView>), ApiError> {
    let body: CreateBody = if body.iter().all(u8::is_ascii_whitespace) {
        CreateBody::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(e.to_string()))?
    };
    let n = state.next_id.fetch_add(1, Ordering::SeqCst);
    let mut session = Session::new(format!("s{n:06}"));
    for c in body.clauses {
        let rev = session.revision;
        session.apply(
            &state.models.types,
            rev,
            Mutation::AddClause {
                label: c.label,
                text: c.text,
            },
        )?;
    }
    let v = view(&state, &session);
    state.insert(session);
    Ok((StatusCode::CREATED, Json(v)))
}

async fn get_session(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<SessionView> {
    let s = state.session(&id)?;
    let s = s.lock().expect("session poisoned");
    Ok(Json(view(&state, &s)))
}

#[derive(Deserialize)]
struct AddBody {
    revision: u64,
    #[serde(alias = "type")]
    label: String,
    text: String,
}

fn mutate(state: &AppState, id: &str, revision: u64, m: Mutation) -> ApiResult<SessionView> {
    let s = state.session(id)?;
    let mut s = s.lock().expect("session poisoned");
    s.apply(&state.models.types, revision, m)?;
    Ok(Json(view(state, &s)))
}

async fn add_clause(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(b): Json<AddBody>,
) -> ApiResult<SessionView> {
    mutate(
        &state,
        &id,
        b.revision,
        Mutation::AddClause {
            label: b.label,
            text: b.text,
        },
    )
}

#[derive(Deserialize)]
struct RevisionQuery {
    revision: u64,
}

async fn remove_clause(
    State(state): State<Arc<AppState>>,
    UrlPath((id, index)): UrlPath<(String, usize)>,
    Query(q): Query<RevisionQuery>,
) -> ApiResult<SessionView> {
    mutate(&state, &id, q.revision, Mutation::RemoveClause { index })
}

async fn accept(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(b): Json<AddBody>,
) -> ApiResult<SessionView> {
    mutate(
        &state,
        &id,
        b.revision,
        Mutation::Accept {
            label: b.label,
            text: b.text,
        },
    )
}

#[derive(Serialize)]
struct LogView {
    id: String,
    revision: u64,
    config_fingerprint: String,
    log: Vec<LogEntry>,
}

async fn get_log(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<LogView> {
    let s = state.session(&id)?;
    let s = s.lock().expect("session poisoned");
    Ok(Json(LogView {
        id: s.id().to_string(),
        revision: s.revision,
        config_fingerprint: state.models.fingerprint.clone(),
        log: s.log.clone(),
    }))
}

fn snapshot(state: &AppState, id: &str) -> Result<(clauserec_core::corpus::Contract, u64), ApiError> {
    let s = state.session(id)?;
    let s = s.lock().expect("session poisoned");
    Ok((s.contract.clone(), s.revision))
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

#[derive(Deserialize)]
struct RelevantQuery {
    methods: Option<String>,
}

#[derive(Serialize)]
struct RelevantView {
    session_id: String,
    revision: u64,
    config_fingerprint: String,
    types: Vec<TypeRelevance>,
    warnings: Vec<String>,
}

async fn relevant_types(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<RelevantQuery>,
) -> ApiResult<RelevantView> {
    let methods: Vec<Method> = match q.methods.as_deref().map(str::trim) {
        None | Some("") => state.models.config.methods.clone(),
        Some(list) => list
            .split(',')
            .map(|m| m.trim().parse::<Method>())
            .collect::<Result<_, _>>()
            .map_err(|e| ApiError::bad_request(e.to_string()))?,
    };
    let (contract, revision) = snapshot(&state, &id)?;
    let models = state.models.clone();
    let (types, warnings) = blocking(move || Ok(models.relevant_types(&contract, &methods)?)).await?;
    Ok(Json(RelevantView {
        session_id: id,
        revision,
        config_fingerprint: state.models.fingerprint.clone(),
        types,
        warnings,
    }))
}

#[derive(Deserialize)]
struct RecommendQuery {
    #[serde(rename = "type")]
    label: String,
    mode: Option<String>,
    variant: Option<String>,
    top_n: Option<usize>,
}

#[derive(Serialize)]
pub struct RecommendationView {
    pub session_id: String,
    pub revision: u64,
    pub config_fingerprint: String,
    #[serde(rename = "type")]
    pub label: String,
    pub variant: Variant,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
    pub retrieved: Vec<RetrievedView>,
    pub generated: Option<GeneratedView>,
}

async fn recommendations(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<RecommendQuery>,
) -> ApiResult<RecommendationView> {
    let label = normalize_label(&q.label);
    let t = state.models.types.id(&label).ok_or_else(|| {
        ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("unknown clause type {:?}", q.label),
        )
    })?;
    let (want_retrieve, want_generate) = match q.mode.as_deref() {
        None | Some("") => (true, true),
        Some("retrieve") => (true, false),
        Some("generate") => (false, true),
        Some(other) => {
            return Err(ApiError::bad_request(format!(
                "unknown mode {other:?} (expected retrieve or generate)"
            )))
        }
    };
    let variant: Variant = q
        .variant
        .as_deref()
        .unwrap_or("ii")
        .parse()
        .map_err(|e: clauserec_core::Error| ApiError::bad_request(e.to_string()))?;
    let top_n = q.top_n.unwrap_or(state.models.config.retrieval.top_n);
    if top_n == 0 {
        return Err(ApiError::bad_request("top_n must be at least 1"));
    }
    if want_generate && !want_retrieve && !state.models.has_generator(t) {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("no generator is loaded for {label:?}"),
        ));
    }
    let (contract, revision) = snapshot(&state, &id)?;
    let warning = contract
        .has_type(t)
        .then(|| format!("contract already contains a {label:?} clause; relevance prediction would not propose it"));
    let models = state.models.clone();
    let (retrieved, generated) = blocking(move || {
        let retrieved = if want_retrieve {
            models.retrieve(&contract, t, variant, top_n)?
        } else {
            Vec::new()
        };
        let generated = if want_generate {
            models.generate(&contract, t)?
        } else {
            None
        };
        Ok((retrieved, generated))
    })
    .await?;
    Ok(Json(RecommendationView {
        session_id: id,
        revision,
        config_fingerprint: state.models.fingerprint.clone(),
        label,
        variant,
        warning,
        retrieved,
        generated,
    }))
}

async fn add_fingerprint(State(fp): State<HeaderValue>, mut res: Response) -> Response {
    res.headers_mut().insert(FINGERPRINT_HEADER, fp);
    res
}

pub fn router(state: Arc<AppState>) -> Router {
    let fp = HeaderValue::from_str(&state.models.fingerprint).expect("hex fingerprint is a valid header");
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/clauses", post(add_clause))
        .route("/sessions/{id}/clauses/{index}", delete(remove_clause))
        .route("/sessions/{id}/relevant-types", get(relevant_types))
        .route("/sessions/{id}/recommendations", get(recommendations))
        .route("/sessions/{id}/accept", post(accept))
        .route("/sessions/{id}/log", get(get_log))
        .layer(middleware::map_response_with_state(fp, add_fingerprint))
        .with_state(state)
}

/// Serves until ctrl-c, then writes the session snapshot if one is configured.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>, snapshot: Option<PathBuf>) -> AppResult<()> {
    if let Some(p) = &snapshot {
        let n = state.load_snapshot(p)?;
        tracing::info!(sessions = n, path = %p.display(), "sessions restored");
    }
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| AppError::Input(format!("cannot bind {addr}: {e}")))?;
    tracing::info!(addr = %listener.local_addr().map_err(|e| AppError::Input(e.to_string()))?, "listening");
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| AppError::Input(format!("server error: {e}")))?;
    if let Some(p) = &snapshot {
        let n = state.save_snapshot(p)?;
        tracing::info!(sessions = n, path = %p.display(), "sessions saved");
    }
    Ok(())
}

/// A server on its own runtime thread, stopped on drop.
pub struct BackgroundServer {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl BackgroundServer {
    pub fn start(state: Arc<AppState>) -> AppResult<Self> {
        let std_listener = std::net::TcpListener::bind("127.0.0.1:0").map_err(|e| AppError::Input(e.to_string()))?;
        std_listener
            .set_nonblocking(true)
            .map_err(|e| AppError::Input(e.to_string()))?;
        let addr = std_listener.local_addr().map_err(|e| AppError::Input(e.to_string()))?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()
                .expect("tokio runtime");
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(std_listener).expect("listener");
                axum::serve(listener, router(state))
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
                    .expect("server");
            });
        });
        Ok(BackgroundServer {
            addr,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
