//! HTTP API for the real-vs-generated study.
//!
//! - `GET  /api/session[?session_id=]` starts a session, or resumes one
//! - `GET  /api/items/{id}` returns image bytes only
//! - `POST /api/responses` takes `{session_id, item_id, choice}`; the first answer per item is kept
//! - `GET  /api/report?session_id=` returns 409 until every item is answered
//!
//! Everything else is served from the static directory.

use crate::bundle::{report_json, StudyBundle};
use crate::commands::now_secs;
use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{any, get, post};
use axum::{Json, Router};
use obidiff::evalharness::{score_study, Label, StudyResponse, StudySession};
use obidiff::Error;
use serde::Deserialize;
use serde_json::json;
use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::Arc;
use tokio::sync::Mutex;
use tower_http::services::ServeDir;

pub struct AppState {
    pub bundle: StudyBundle,
    // One lock per session keeps its response log single-writer.
    sessions: std::sync::Mutex<HashMap<String, Arc<Mutex<StudySession>>>>,
}

impl AppState {
    pub fn new(bundle: StudyBundle) -> Self {
        Self { bundle, sessions: std::sync::Mutex::new(HashMap::new()) }
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<StudySession>>, ApiError> {
        let mut map = self.sessions.lock().expect("session map poisoned");
        if let Some(s) = map.get(id) {
            return Ok(s.clone());
        }
        if !self.bundle.has_session(id) {
            return Err(ApiError::not_found("unknown_session", format!("no session {id:?}")));
        }
        let s = self.bundle.load_session(id).map_err(ApiError::internal)?;
        let handle = Arc::new(Mutex::new(s));
        map.insert(id.to_string(), handle.clone());
        Ok(handle)
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    detail: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, detail: impl Into<String>) -> Self {
        Self { status, code, detail: detail.into() }
    }

    fn bad_request(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", detail)
    }

    fn not_found(code: &'static str, detail: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, detail)
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.code, "detail": self.detail }))).into_response()
    }
}

pub fn router(state: Arc<AppState>, static_dir: Option<PathBuf>) -> Router {
    let app = Router::new()
        .route("/api/session", get(get_session))
        .route("/api/items/{id}", get(get_item))
        .route("/api/responses", post(post_response))
        .route("/api/report", get(get_report))
        .route("/api/{*rest}", any(api_fallback))
        .with_state(state);
    match static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app.route("/", get(placeholder_index)),
    }
}

async fn placeholder_index() -> Html<&'static str> {
    Html(include_str!("../static/index.html"))
}

async fn api_fallback() -> ApiError {
    ApiError::not_found("not_found", "no such endpoint")
}

fn session_view(s: &StudySession) -> serde_json::Value {
    let answered: BTreeMap<&str, Label> = s.responses.iter().map(|(k, r)| (k.as_str(), r.choice)).collect();
    json!({
        "session_id": s.session_id,
        "n_items": s.items.len(),
        "items": s.items.iter().map(|i| i.item_id.as_str()).collect::<Vec<_>>(),
        "answered": answered,
    })
}

async fn get_session(
    State(st): State<Arc<AppState>>,
    Query(q): Query<HashMap<String, String>>,
) -> Result<Json<serde_json::Value>, ApiError> {
    if let Some(id) = q.get("session_id") {
        let handle = st.session(id)?;
        let s = handle.lock().await;
        return Ok(Json(session_view(&s)));
    }
    let s = st.bundle.new_session(now_secs()).map_err(ApiError::internal)?;
    let view = session_view(&s);
    st.sessions.lock().expect("session map poisoned").insert(s.session_id.clone(), Arc::new(Mutex::new(s)));
    Ok(Json(view))
}

async fn get_item(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let item = st.bundle.item(&id).ok_or_else(|| ApiError::not_found("unknown_item", format!("no item {id:?}")))?;
    let bytes = tokio::fs::read(st.bundle.image_path(item)).await.map_err(ApiError::internal)?;
    Ok(([(header::CONTENT_TYPE, "image/png"), (header::CACHE_CONTROL, "no-store")], bytes).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ResponseBody {
    session_id: String,
    item_id: String,
    choice: Label,
}

async fn post_response(State(st): State<Arc<AppState>>, body: Bytes) -> Result<Json<serde_json::Value>, ApiError> {
    let req: ResponseBody = serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let handle = st.session(&req.session_id)?;
    let mut s = handle.lock().await;
    if s.item(&req.item_id).is_none() {
        return Err(ApiError::not_found("unknown_item", format!("no item {:?}", req.item_id)));
    }
    if let Some(first) = s.responses.get(&req.item_id) {
        return Ok(Json(json!({
            "status": "duplicate",
            "warning": "item already answered; the first answer is kept",
            "item_id": req.item_id,
            "choice": first.choice,
        })));
    }
    let resp = StudyResponse { item_id: req.item_id.clone(), choice: req.choice, timestamp: now_secs() };
    st.bundle.append_response(&s.session_id, &resp).map_err(ApiError::internal)?;
    s.record(resp).map_err(ApiError::internal)?;
    let remaining = s.unanswered().len();
    Ok(Json(json!({
        "status": "recorded",
        "item_id": req.item_id,
        "answered": s.responses.len(),
        "remaining": remaining,
    })))
}

/// Scored from the response log on disk, as `study-score` does.
async fn get_report(State(st): State<Arc<AppState>>, Query(q): Query<HashMap<String, String>>) -> Result<Response, ApiError> {
    let id = q.get("session_id").ok_or_else(|| ApiError::bad_request("session_id query parameter is required"))?;
    let handle = st.session(id)?;
    let _guard = handle.lock().await;
    let session = st.bundle.load_session(id).map_err(ApiError::internal)?;
    match score_study(&session) {
        Ok(report) => {
            let body = report_json(&report).map_err(ApiError::internal)?;
            Ok(([(header::CONTENT_TYPE, "application/json")], body).into_response())
        }
        Err(Error::IncompleteSession(missing)) => Err(ApiError::new(
            StatusCode::CONFLICT,
            "incomplete",
            format!("{} of {} items unanswered", missing.len(), session.items.len()),
        )),
        Err(e) => Err(ApiError::internal(e)),
    }
}
