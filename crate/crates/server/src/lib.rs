//! HTTP surface for edit sessions, storage, validation and runs.
//!
//! Every route lives under `/api/v1`. Bodies are JSON except workflow
//! documents, which travel as wire-format XML. Errors share one shape:
//! `{"code": .., "message": .., "rule"?: .., "revision"?: .., "findings"?: ..}`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use flowgate::executor::{self, ExecError, ExecOptions, RunRecord, RunStatus};
use flowgate::model::ConcreteWorkflow;
use flowgate::session::{ChangeAck, ChangeEvent, EditSession, SessionError};
use flowgate::store::{Store, StoreError};
use flowgate::validation::{self, Finding, Mode};
use flowgate::wire::{self, StateDigest, WireError};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::net::TcpListener;

pub struct AppState {
    store: Store,
    exec: ExecOptions,
    sessions: Mutex<HashMap<String, Arc<Mutex<EditSession>>>>,
}

impl AppState {
    pub fn new(store: Store, exec: ExecOptions) -> Arc<Self> {
        Arc::new(Self {
            store,
            exec,
            sessions: Mutex::new(HashMap::new()),
        })
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<EditSession>>, ApiError> {
        self.sessions
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("session {id}")))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/changes", post(apply_change))
        .route("/sessions/{id}/validate", post(validate_session))
        .route("/sessions/{id}/save", post(save_session))
        .route("/graphs", get(list_graphs))
        .route("/workflows", get(list_workflows))
        .route("/workflows/{name}", get(get_workflow))
        .route("/workflows/{name}/submit", post(submit))
        .route("/runs/{id}", get(get_run))
        .route("/export/{name}", get(export))
        .route("/import", post(import))
        .route("/validate", post(validate_document));
    Router::new().nest("/api/v1", api).with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    if let Ok(addr) = listener.local_addr() {
        tracing::info!(%addr, root = %state.store.root().display(), "listening");
    }
    axum::serve(listener, router(state)).await
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({ "code": code, "message": message.into() }),
        }
    }

    fn with(mut self, key: &str, value: impl Serialize) -> Self {
        self.body[key] = serde_json::to_value(value).unwrap();
        self
    }

    fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("{} not found", what.into()))
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "malformed_payload", message)
    }

    fn finding(f: &Finding) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", f.message.clone())
            .with("rule", f.rule)
            .with("target", &f.target)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::StaleRevision { actual, .. } => {
                ApiError::new(StatusCode::CONFLICT, "stale_revision", e.to_string()).with("revision", actual)
            }
            SessionError::Validation(f) => ApiError::finding(&f),
            SessionError::NotFound(what) => ApiError::not_found(what),
            SessionError::MalformedPayload(m) => ApiError::bad_request(m),
            SessionError::InvalidInitial(w) => w.into(),
            SessionError::Store(s) => s.into(),
        }
    }
}

impl From<WireError> for ApiError {
    fn from(e: WireError) -> Self {
        match &e {
            WireError::MalformedXml(_) => ApiError::new(StatusCode::BAD_REQUEST, "malformed_xml", e.to_string()),
            WireError::SchemaViolation { path, .. } => {
                ApiError::new(StatusCode::BAD_REQUEST, "schema_violation", e.to_string()).with("path", path)
            }
            WireError::InvariantViolation(f) => ApiError::finding(f),
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound { .. } => ApiError::new(StatusCode::NOT_FOUND, "not_found", e.to_string()),
            StoreError::InvalidName(_) | StoreError::NameMismatch { .. } => ApiError::bad_request(e.to_string()),
            StoreError::Document { source, .. } => source.into(),
            StoreError::Io { .. } => ApiError::internal(e.to_string()),
        }
    }
}

impl From<ExecError> for ApiError {
    fn from(e: ExecError) -> Self {
        match e {
            ExecError::SubmitRejected(findings) => ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "submit_rejected",
                "workflow is not submittable",
            )
            .with("findings", findings),
            ExecError::UnsupportedTarget { .. } | ExecError::ReservedJobName(_) => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "submit_rejected", e.to_string())
            }
            ExecError::NotFound(id) => ApiError::not_found(format!("run {id}")),
            ExecError::Invalid(w) => w.into(),
            ExecError::Store(s) => s.into(),
            ExecError::CorruptRecord { .. } => ApiError::internal(e.to_string()),
        }
    }
}

fn json_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(e.to_string()))
}

fn xml(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "application/xml")], bytes).into_response()
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    name: Option<String>,
    from_workflow: Option<String>,
    from_graph: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub revision: u64,
    pub digest: StateDigest,
    pub state: ConcreteWorkflow,
}

impl SessionView {
    fn of(s: &EditSession) -> Self {
        Self {
            session_id: s.id().to_string(),
            revision: s.revision(),
            digest: s.digest().clone(),
            state: s.snapshot(),
        }
    }
}

async fn create_session(State(app): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: CreateSession = if body.is_empty() {
        CreateSession::default()
    } else {
        json_body(&body)?
    };
    let session = match (req.from_workflow, req.from_graph) {
        (Some(_), Some(_)) => return Err(ApiError::bad_request("give from_workflow or from_graph, not both")),
        (Some(w), None) => {
            let mut workflow = app.store.get_workflow(&w)?;
            if let Some(name) = req.name {
                workflow.name = name;
            }
            EditSession::open(workflow)?
        }
        (None, Some(g)) => {
            let graph = app.store.get_graph(&g)?;
            let name = req.name.unwrap_or_else(|| graph.name.clone());
            EditSession::open(ConcreteWorkflow::promote(graph, name))?
        }
        (None, None) => {
            let name = req
                .name
                .ok_or_else(|| ApiError::bad_request("name is required for a new session"))?;
            EditSession::new(&name)?
        }
    };
    let view = SessionView::of(&session);
    app.sessions
        .lock()
        .unwrap()
        .insert(view.session_id.clone(), Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(view)).into_response())
}

async fn get_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    let session = app.session(&id)?;
    let s = session.lock().unwrap();
    Ok(Json(SessionView::of(&s)))
}

async fn apply_change(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<ChangeAck>, ApiError> {
    let session = app.session(&id)?;
    let ev: ChangeEvent = json_body(&body)?;
    let ack = session.lock().unwrap().apply(ev)?;
    Ok(Json(ack))
}

#[derive(Debug, Deserialize)]
struct ModeQuery {
    #[serde(default)]
    mode: Option<String>,
}

impl ModeQuery {
    fn mode(&self) -> Result<Mode, ApiError> {
        self.mode
            .as_deref()
            .map_or(Ok(Mode::default()), str::parse)
            .map_err(ApiError::bad_request)
    }
}

async fn validate_session(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<ModeQuery>,
) -> Result<Json<Vec<Finding>>, ApiError> {
    let mode = q.mode()?;
    let session = app.session(&id)?;
    let w = session.lock().unwrap().snapshot();
    Ok(Json(validation::validate(&w, mode)))
}

async fn save_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let session = app.session(&id)?;
    let s = session.lock().unwrap();
    match s.save(&app.store) {
        Ok(keys) => Ok(Json(keys).into_response()),
        Err(SessionError::Validation(f)) => {
            let findings: Vec<Finding> = validation::validate_structure(&s.workflow().graph)
                .into_iter()
                .filter(Finding::is_error)
                .collect();
            let findings = if findings.is_empty() { vec![f.clone()] } else { findings };
            Err(ApiError::finding(&f).with("findings", findings))
        }
        Err(e) => Err(e.into()),
    }
}

async fn list_graphs(State(app): State<Arc<AppState>>) -> Result<Json<Vec<String>>, ApiError> {
    Ok(Json(app.store.list_graphs()?))
}

async fn list_workflows(State(app): State<Arc<AppState>>) -> Result<Json<Vec<String>>, ApiError> {
    Ok(Json(app.store.list_workflows()?))
}

async fn get_workflow(State(app): State<Arc<AppState>>, Path(name): Path<String>) -> Result<Response, ApiError> {
    Ok(xml(app.store.workflow_bytes(&name)?))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Submitted {
    pub run_id: String,
}

async fn submit(State(app): State<Arc<AppState>>, Path(name): Path<String>) -> Result<Response, ApiError> {
    let task = tokio::task::spawn_blocking(move || -> Result<String, ApiError> {
        let w = app.store.get_workflow(&name)?;
        let handle = executor::submit(&w, &app.store, &app.exec)?;
        tracing::info!(run = %handle.run_id, workflow = %name, "submitted");
        Ok(handle.run_id)
    });
    let run_id = task.await.map_err(|e| ApiError::internal(e.to_string()))??;
    Ok((StatusCode::ACCEPTED, Json(Submitted { run_id })).into_response())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunView {
    pub status: RunStatus,
    #[serde(flatten)]
    pub record: RunRecord,
}

async fn get_run(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<RunView>, ApiError> {
    let record = executor::status(&app.store, &id)?;
    Ok(Json(RunView {
        status: record.status(),
        record,
    }))
}

async fn export(State(app): State<Arc<AppState>>, Path(name): Path<String>) -> Result<Response, ApiError> {
    let bytes = app.store.workflow_bytes(&name)?;
    let disposition = format!("attachment; filename=\"{name}.xml\"");
    Ok(([(header::CONTENT_DISPOSITION, disposition)], xml(bytes)).into_response())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Imported {
    pub workflow_key: String,
    pub graph_key: String,
    pub digest: StateDigest,
}

async fn import(State(app): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let w = wire::parse(&body)?;
    let graph_key = app.store.put_graph(&w.graph_name, &w.abstract_graph())?;
    let workflow_key = app.store.put_workflow(&w.name, &w)?;
    let imported = Imported {
        workflow_key,
        graph_key,
        digest: wire::digest(&w)?,
    };
    Ok((StatusCode::CREATED, Json(imported)).into_response())
}

async fn validate_document(Query(q): Query<ModeQuery>, body: Bytes) -> Result<Json<Vec<Finding>>, ApiError> {
    let mode = q.mode()?;
    let w = wire::decode(&body)?;
    Ok(Json(validation::validate(&w, mode)))
}
