use std::collections::HashSet;
use std::net::SocketAddr;
use std::path::{Path as FsPath, PathBuf};
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use super::{AuditCase, AuditError, AuditStore, CaseStatus, Verdict, VerdictSubmission, RUBRIC};
use crate::crawler::ImageExt;

#[derive(Clone)]
pub struct AuditState {
    store: Arc<AuditStore>,
    media_root: PathBuf,
    image_keys: Arc<HashSet<String>>,
}

impl AuditState {
    /// Images resolve to `media_root/media/{source}/{filename}`.
    pub fn new(store: AuditStore, media_root: impl Into<PathBuf>) -> Self {
        let image_keys = store.batch().cases.iter().flat_map(|c| c.image_filenames.iter().cloned()).collect();
        Self { store: Arc::new(store), media_root: media_root.into(), image_keys: Arc::new(image_keys) }
    }

    pub fn store(&self) -> &AuditStore {
        &self.store
    }
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: message.into() })).into_response()
}

impl IntoResponse for AuditError {
    fn into_response(self) -> Response {
        let status = match &self {
            AuditError::UnknownCase(_) => StatusCode::NOT_FOUND,
            AuditError::Validation(_) | AuditError::NotEnoughEligible { .. } => StatusCode::BAD_REQUEST,
            AuditError::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        };
        error(status, self.to_string())
    }
}

#[derive(Deserialize)]
struct StatusFilter {
    status: Option<String>,
}

#[derive(Serialize)]
struct CaseSummary {
    case_id: String,
    qid: String,
    entity_name: String,
    status: CaseStatus,
    image_count: usize,
}

#[derive(Serialize)]
struct ImageRef {
    filename: String,
    url: String,
}

#[derive(Serialize)]
struct CasePayload {
    #[serde(flatten)]
    case: AuditCase,
    rubric: &'static str,
    images: Vec<ImageRef>,
    latest_verdict: Option<Verdict>,
}

#[derive(Serialize)]
struct Ack {
    stored: bool,
    case_id: String,
    status: CaseStatus,
    timestamp: String,
}

async fn list_cases(State(s): State<AuditState>, Query(filter): Query<StatusFilter>) -> Response {
    let wanted = match filter.status.as_deref() {
        None | Some("all") => None,
        Some("pending") => Some(CaseStatus::Pending),
        Some("done") => Some(CaseStatus::Done),
        Some(other) => return error(StatusCode::BAD_REQUEST, format!("unknown status {other:?}")),
    };
    let rows: Vec<CaseSummary> = s
        .store
        .cases()
        .into_iter()
        .filter(|c| wanted.is_none_or(|w| c.status == w))
        .map(|c| CaseSummary {
            image_count: c.image_filenames.len(),
            case_id: c.case_id,
            qid: c.qid.to_string(),
            entity_name: c.entity_name,
            status: c.status,
        })
        .collect();
    Json(rows).into_response()
}

async fn get_case(State(s): State<AuditState>, Path(id): Path<String>) -> Response {
    let Some(case) = s.store.case(&id) else {
        return AuditError::UnknownCase(id).into_response();
    };
    let images = case
        .image_filenames
        .iter()
        .map(|k| ImageRef { filename: k.clone(), url: format!("/api/images/{k}") })
        .collect();
    let latest_verdict = s.store.latest(&id);
    Json(CasePayload { case, rubric: RUBRIC, images, latest_verdict }).into_response()
}

async fn post_verdict(
    State(s): State<AuditState>,
    Path(id): Path<String>,
    Json(body): Json<VerdictSubmission>,
) -> Response {
    let store = s.store.clone();
    match tokio::task::spawn_blocking(move || store.submit(&id, body)).await {
        Ok(Ok(v)) => Json(Ack { stored: true, case_id: v.case_id, status: CaseStatus::Done, timestamp: v.timestamp })
            .into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn get_image(State(s): State<AuditState>, Path(key): Path<String>) -> Response {
    if !s.image_keys.contains(&key) {
        return error(StatusCode::NOT_FOUND, format!("no case image {key}"));
    }
    let mime = FsPath::new(&key)
        .extension()
        .and_then(|e| e.to_str())
        .and_then(ImageExt::from_ext)
        .map_or("application/octet-stream", ImageExt::mime);
    match tokio::fs::read(s.media_root.join("media").join(&key)).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, mime)], bytes).into_response(),
        Err(e) => error(StatusCode::NOT_FOUND, format!("{key}: {e}")),
    }
}

async fn report(State(s): State<AuditState>) -> Response {
    Json(s.store.report()).into_response()
}

/// REST routes under `/api`, plus the static UI at `/` when `ui_dir` is given.
pub fn router(state: AuditState, ui_dir: Option<&FsPath>) -> Router {
    let api = Router::new()
        .route("/api/cases", get(list_cases))
        .route("/api/cases/:id", get(get_case))
        .route("/api/cases/:id/verdict", post(post_verdict))
        .route("/api/images/*key", get(get_image))
        .route("/api/report", get(report))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    let addr: Option<SocketAddr> = listener.local_addr().ok();
    tracing::info!(?addr, "audit service listening");
    axum::serve(listener, app).await
}
