//! HTTP routes.

use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use serde_json::json;

use crate::app::{AppState, SessionSource};
use crate::error::{Result, ServiceError};
use crate::jobs::JobStatus;
use crate::wire::{Command, CreateSessionRequest, HeatmapQuery, JobAccepted, TrainRequest, SCHEMA_VERSION};

const MAX_UPLOAD_BYTES: usize = 512 * 1024 * 1024;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", get(list_sessions).post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/events", post(post_event))
        .route("/sessions/{id}/auto-group", post(auto_group))
        .route("/sessions/{id}/auto-position", post(auto_position))
        .route("/sessions/{id}/finetune", post(finetune))
        .route("/sessions/{id}/grid", get(grid))
        .route("/sessions/{id}/images/{img}/heatmap", get(heatmap))
        .route("/jobs/{id}", get(get_job).delete(cancel_job))
        .route("/train", post(train))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(state)
}

/// Runs a blocking state operation off the async workers.
async fn blocking<T, F>(state: Arc<AppState>, f: F) -> Result<T>
where
    T: Send + 'static,
    F: FnOnce(&Arc<AppState>) -> Result<T> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&state))
        .await
        .map_err(|e| ServiceError::Core(pilesort_core::Error::Precondition(format!("worker failed: {e}"))))?
}

fn ok<T: Serialize>(body: T) -> Response {
    Json(body).into_response()
}

fn accepted(job_id: String, session_id: Option<String>) -> Response {
    (
        StatusCode::ACCEPTED,
        Json(JobAccepted {
            schema_version: SCHEMA_VERSION,
            job_id,
            session_id,
        }),
    )
        .into_response()
}

async fn health() -> Response {
    ok(json!({ "schema_version": SCHEMA_VERSION, "status": "ok" }))
}

async fn list_sessions(State(st): State<Arc<AppState>>) -> Response {
    ok(json!({ "schema_version": SCHEMA_VERSION, "sessions": st.session_ids() }))
}

/// Accepts either a JSON [`CreateSessionRequest`] or a multipart form with
/// image files (any field name; the file name becomes the image id) and
/// optional text fields `session_id`, `seed`, `threshold`, `extractor`.
async fn create_session(State(st): State<Arc<AppState>>, req: Request) -> Result<Response> {
    let is_multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    let (body, source) = if is_multipart {
        let mut mp = <Multipart as axum::extract::FromRequest<()>>::from_request(req, &())
            .await
            .map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        read_multipart(&mut mp).await?
    } else {
        let Json(body) = <Json<CreateSessionRequest> as axum::extract::FromRequest<()>>::from_request(req, &())
            .await
            .map_err(|e| ServiceError::BadRequest(e.body_text()))?;
        let source = match (&body.dataset, &body.features) {
            (Some(d), None) => SessionSource::Dataset(d.into()),
            (None, Some(f)) => SessionSource::Features(f.into()),
            _ => {
                return Err(ServiceError::BadRequest(
                    "give exactly one of `dataset` or `features` (or upload images as multipart)".into(),
                ))
            }
        };
        (body, source)
    };
    let config = st.session_config(&body)?;
    let (sid, job) = blocking(st, move |st| st.create_session_job(body.session_id, source, config)).await?;
    Ok(accepted(job, Some(sid)))
}

async fn read_multipart(mp: &mut Multipart) -> Result<(CreateSessionRequest, SessionSource)> {
    let bad = |e: axum::extract::multipart::MultipartError| ServiceError::BadRequest(e.body_text());
    let mut body = CreateSessionRequest::default();
    let mut files = Vec::new();
    while let Some(field) = mp.next_field().await.map_err(bad)? {
        if let Some(name) = field.file_name().map(str::to_string) {
            files.push((name, field.bytes().await.map_err(bad)?.to_vec()));
            continue;
        }
        let key = field.name().unwrap_or_default().to_string();
        let text = field.text().await.map_err(bad)?;
        let num = |what: &str| ServiceError::BadRequest(format!("field `{what}` is not a number"));
        match key.as_str() {
            "session_id" => body.session_id = Some(text),
            "seed" => body.seed = Some(text.trim().parse().map_err(|_| num("seed"))?),
            "threshold" => body.threshold = Some(text.trim().parse().map_err(|_| num("threshold"))?),
            "extractor" => body.extractor = Some(text),
            other => return Err(ServiceError::BadRequest(format!("unexpected form field `{other}`"))),
        }
    }
    if files.is_empty() {
        return Err(ServiceError::BadRequest("no image files in upload".into()));
    }
    Ok((body, SessionSource::Uploaded(files)))
}

async fn get_session(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response> {
    Ok(ok(blocking(st, move |st| st.view(&id)).await?))
}

async fn post_event(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: std::result::Result<Json<Command>, axum::extract::rejection::JsonRejection>,
) -> Result<Response> {
    let Json(cmd) = body.map_err(|e| ServiceError::BadRequest(e.body_text()))?;
    Ok(ok(blocking(st, move |st| st.apply(&id, cmd)).await?))
}

async fn auto_group(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response> {
    Ok(ok(blocking(st, move |st| st.auto_group(&id)).await?))
}

async fn auto_position(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response> {
    Ok(ok(blocking(st, move |st| st.auto_position(&id)).await?))
}

async fn finetune(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response> {
    let sid = id.clone();
    let job = blocking(st, move |st| st.finetune_job(&id)).await?;
    Ok(accepted(job, Some(sid)))
}

async fn grid(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response> {
    Ok(ok(blocking(st, move |st| st.grid(&id)).await?))
}

async fn heatmap(
    State(st): State<Arc<AppState>>,
    Path((id, img)): Path<(String, String)>,
    q: std::result::Result<Query<HeatmapQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<Response> {
    let Query(q) = q.map_err(|e| ServiceError::BadRequest(e.body_text()))?;
    Ok(ok(blocking(st, move |st| st.heatmap(&id, &img, &q)).await?))
}

#[derive(Serialize)]
struct JobView {
    schema_version: u32,
    #[serde(flatten)]
    status: JobStatus,
}

async fn get_job(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response> {
    let status = st.jobs.status(&id).ok_or_else(|| ServiceError::not_found("job", &id))?;
    Ok(ok(JobView {
        schema_version: SCHEMA_VERSION,
        status,
    }))
}

async fn cancel_job(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response> {
    let status = st.jobs.cancel(&id).ok_or_else(|| ServiceError::not_found("job", &id))?;
    Ok(ok(JobView {
        schema_version: SCHEMA_VERSION,
        status,
    }))
}

async fn train(
    State(st): State<Arc<AppState>>,
    body: std::result::Result<Json<TrainRequest>, axum::extract::rejection::JsonRejection>,
) -> Result<Response> {
    let Json(req) = body.map_err(|e| ServiceError::BadRequest(e.body_text()))?;
    let job = blocking(st, move |st| st.train_job(req)).await?;
    Ok(accepted(job, None))
}
