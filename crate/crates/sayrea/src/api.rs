//! HTTP API over one engine. Every mutation runs under a single lock;
//! reason identification runs outside it and re-enters to apply its result.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use sayrea_core::catalog::ServiceId;
use sayrea_core::context::{RawValue, Timestamp};
use sayrea_core::engine::{Engine, EngineError, RequestState};
use sayrea_core::metrics;
use sayrea_core::recognition::{UiEvent, UiPayload};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};
use tower_http::cors::{Any, CorsLayer};

use crate::store::DataDir;

pub type Clock = Arc<dyn Fn() -> Timestamp + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(|| {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as Timestamp)
            .unwrap_or(0)
    })
}

struct Inner {
    engine: Engine,
    store: Option<DataDir>,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Mutex<Inner>>,
    clock: Clock,
    token: Option<Arc<str>>,
}

impl AppState {
    pub fn new(engine: Engine, store: Option<DataDir>, clock: Clock, token: Option<String>) -> Self {
        AppState { inner: Arc::new(Mutex::new(Inner { engine, store })), clock, token: token.map(Arc::from) }
    }

    fn lock(&self) -> Result<MutexGuard<'_, Inner>, ApiError> {
        self.inner.lock().map_err(|_| ApiError::internal("engine lock poisoned"))
    }

    /// Runs a mutation and persists whatever it journaled, even on error.
    fn mutate<T>(&self, f: impl FnOnce(&mut Engine) -> Result<T, EngineError>) -> Result<T, ApiError> {
        let mut g = self.lock()?;
        let out = f(&mut g.engine);
        let Inner { engine, store } = &mut *g;
        if let Some(store) = store {
            store.persist(engine).map_err(|e| ApiError::internal(format!("persisting journal: {e:#}")))?;
        }
        Ok(out?)
    }

    fn read<T>(&self, f: impl FnOnce(&Engine) -> T) -> Result<T, ApiError> {
        Ok(f(&self.lock()?.engine))
    }

    fn ts(&self, ts: Option<Timestamp>) -> Timestamp {
        ts.unwrap_or_else(|| (self.clock)())
    }

    /// Journal as JSON lines, for tests and export.
    pub fn journal_jsonl(&self) -> String {
        self.read(|e| sayrea_core::engine::journal_to_jsonl(e.journal())).unwrap_or_default()
    }

    pub fn rules_jsonl(&self) -> String {
        self.read(|e| e.rules().export_jsonl()).unwrap_or_default()
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: String,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError { status, code: code.to_string(), message: message.into() }
    }

    fn internal(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", message)
    }

    fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "BAD_REQUEST", message)
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let code = e.code();
        let status = match code {
            "REQUEST_NOT_FOUND" | "RULE_NOT_FOUND" | "UNKNOWN_SERVICE" => StatusCode::NOT_FOUND,
            "REQUEST_NOT_PENDING" | "REQUEST_NOT_ANSWERED" => StatusCode::CONFLICT,
            "BACKEND_UNAVAILABLE" => StatusCode::SERVICE_UNAVAILABLE,
            "NO_ATTRIBUTES_IDENTIFIED" => StatusCode::UNPROCESSABLE_ENTITY,
            "JOURNAL_ERROR" => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "v": 1, "code": self.code, "message": self.message });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

fn parse<T: DeserializeOwned + Default>(body: &Bytes) -> Result<T, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

fn parse_required<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

fn reply(mut v: Value) -> ApiResult {
    if let Some(obj) = v.as_object_mut() {
        obj.insert("v".into(), json!(1));
    }
    Ok(Json(v))
}

fn to_value<T: serde::Serialize>(t: &T) -> Value {
    serde_json::to_value(t).expect("API payload serializes")
}

pub fn router(state: AppState) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods([Method::GET, Method::POST, Method::DELETE])
        .allow_headers([header::CONTENT_TYPE, header::AUTHORIZATION]);
    Router::new()
        .route("/context", post(post_context))
        .route("/events", post(post_event))
        .route("/recommendations", get(get_recommendations))
        .route("/recommendations/{service}/reject", post(post_reject))
        .route("/usage", post(post_usage))
        .route("/requests", get(get_requests))
        .route("/requests/{id}/reason", post(post_reason))
        .route("/requests/{id}/confirm", post(post_confirm))
        .route("/requests/{id}/dismiss", post(post_dismiss))
        .route("/requests/{id}/select", post(post_select))
        .route("/rules", get(get_rules))
        .route("/rules/{id}", delete(delete_rule))
        .route("/metrics", get(get_metrics))
        .route("/state", get(get_state))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .layer(cors)
        .with_state(state)
}

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let expected = HeaderValue::from_str(&format!("Bearer {token}")).ok();
        let ok = req.method() == Method::OPTIONS || req.headers().get(header::AUTHORIZATION) == expected.as_ref();
        if !ok {
            return ApiError::new(StatusCode::UNAUTHORIZED, "UNAUTHORIZED", "missing or wrong bearer token").into_response();
        }
    }
    next.run(req).await
}

#[derive(Default, Deserialize)]
struct ContextBody {
    #[serde(default)]
    values: BTreeMap<String, RawValue>,
    ts: Option<Timestamp>,
}

async fn post_context(State(s): State<AppState>, body: Bytes) -> ApiResult {
    let b: ContextBody = parse(&body)?;
    let ts = s.ts(b.ts);
    let (snapshot, opened) = s.mutate(|e| e.update_context(b.values, ts))?;
    reply(json!({ "snapshot": snapshot, "opened": opened }))
}

#[derive(Deserialize)]
struct EventBody {
    #[serde(flatten)]
    payload: UiPayload,
    ts: Option<Timestamp>,
}

async fn post_event(State(s): State<AppState>, body: Bytes) -> ApiResult {
    let b: EventBody = parse_required(&body)?;
    let ts = s.ts(b.ts);
    let opened = s.mutate(|e| e.ingest_event(UiEvent { timestamp: ts, payload: b.payload }))?;
    reply(json!({ "opened": opened }))
}

#[derive(Deserialize)]
struct KQuery {
    k: Option<usize>,
}

async fn get_recommendations(State(s): State<AppState>, Query(q): Query<KQuery>) -> ApiResult {
    let recs = s.read(|e| e.recommendations(q.k))??;
    reply(json!({ "recommendations": recs }))
}

#[derive(Deserialize)]
struct UsageBody {
    service: ServiceId,
    ts: Option<Timestamp>,
}

async fn post_usage(State(s): State<AppState>, body: Bytes) -> ApiResult {
    let b: UsageBody = parse_required(&body)?;
    let ts = s.ts(b.ts);
    let request = s.mutate(|e| e.inject_usage(b.service, ts))?;
    reply(json!({ "request": request }))
}

async fn get_requests(State(s): State<AppState>) -> ApiResult {
    let pending = s.read(|e| to_value(&e.pending_requests()))?;
    reply(json!({ "requests": pending }))
}

#[derive(Deserialize)]
struct ReasonBody {
    reason: String,
    ts: Option<Timestamp>,
}

async fn post_reason(State(s): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let b: ReasonBody = parse_required(&body)?;
    let ts = s.ts(b.ts);
    let (job, identifier) = s.mutate(|e| Ok((e.prepare_reason(&id, &b.reason, ts)?, e.identifier())))?;
    let (job, result) = tokio::task::spawn_blocking(move || {
        let result = job.run(identifier.as_ref());
        (job, result)
    })
    .await
    .map_err(|e| ApiError::internal(format!("identification task failed: {e}")))?;
    let rule = s.mutate(|e| e.complete_reason(job, result, ts))?;
    reply(json!({ "rule": rule }))
}

#[derive(Deserialize)]
struct ConfirmBody {
    index: usize,
    ts: Option<Timestamp>,
}

async fn post_confirm(State(s): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let b: ConfirmBody = parse_required(&body)?;
    let ts = s.ts(b.ts);
    let rule = s.mutate(|e| e.confirm_predicted(&id, b.index, ts))?;
    reply(json!({ "rule": rule }))
}

#[derive(Default, Deserialize)]
struct TsBody {
    ts: Option<Timestamp>,
}

async fn post_dismiss(State(s): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let b: TsBody = parse(&body)?;
    let ts = s.ts(b.ts);
    let request = s.mutate(|e| e.dismiss(&id, ts))?;
    reply(json!({ "request": request }))
}

#[derive(Deserialize)]
struct SelectBody {
    attributes: Vec<String>,
    ts: Option<Timestamp>,
}

async fn post_select(State(s): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let b: SelectBody = parse_required(&body)?;
    let ts = s.ts(b.ts);
    let (ratio, accurate) = s.mutate(|e| e.select_attributes(&id, &b.attributes, ts))?;
    reply(json!({ "ratio": ratio, "accurate": accurate }))
}

async fn post_reject(State(s): State<AppState>, Path(service): Path<String>, body: Bytes) -> ApiResult {
    let b: TsBody = parse(&body)?;
    let service: ServiceId = service.parse().map_err(|e: sayrea_core::catalog::CatalogError| ApiError::bad_request(e.to_string()))?;
    let ts = s.ts(b.ts);
    let request = s.mutate(|e| e.reject(&service, ts))?;
    reply(json!({ "request": request }))
}

async fn get_rules(State(s): State<AppState>) -> ApiResult {
    let rules = s.read(|e| to_value(&e.rules().rules().collect::<Vec<_>>()))?;
    reply(json!({ "rules": rules }))
}

async fn delete_rule(State(s): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let b: TsBody = parse(&body)?;
    let ts = s.ts(b.ts);
    let rule = s.mutate(|e| e.delete_rule(&id, ts))?;
    reply(json!({ "rule": rule }))
}

async fn get_metrics(State(s): State<AppState>) -> ApiResult {
    let report = s.read(|e| metrics::compute(e.journal(), None, 0, 0))?;
    Ok(Json(to_value(&report)))
}

async fn get_state(State(s): State<AppState>) -> ApiResult {
    let state = s.read(|e| {
        let st = e.state();
        json!({
            "snapshot": st.snapshot,
            "raw_context": st.raw_context,
            "recommendations": e.recommendations(None).unwrap_or_default(),
            "requests": st.requests.values().filter(|r| r.state == RequestState::Pending).collect::<Vec<_>>(),
            "suppressed": st.suppressed,
            "rules": e.rules().rules().collect::<Vec<_>>(),
            "recency": st.recency.entries(),
            "list_size": e.config().list_size,
            "registry": e.registry().dimensions(),
            "catalog": e.catalog().to_doc(),
            "journal_length": e.journal().len(),
        })
    })?;
    reply(state)
}
