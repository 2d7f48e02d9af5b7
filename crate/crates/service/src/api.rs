use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use updown_core::estimators::CiOption;

use crate::error::ApiError;
use crate::session::{EstimatesQuery, ExportDoc, ResponseRequest};
use crate::store::Store;

type Shared = Arc<Store>;

/// Routes of the trial API.
pub fn router(store: Arc<Store>) -> Router {
    Router::new()
        .route("/trials", post(create).get(list))
        .route("/trials/import", post(import))
        .route("/trials/{id}", get(show))
        .route("/trials/{id}/responses", post(respond))
        .route("/trials/{id}/what-if", get(what_if))
        .route("/trials/{id}/estimates", get(estimates))
        .route("/trials/{id}/export", get(export))
        .fallback(|| async { ApiError::new(404, "not_found", "no such route") })
        .with_state(store)
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

async fn create(State(store): State<Shared>, body: Bytes) -> Result<Response, ApiError> {
    let config = parse_body(&body).map_err(|e| ApiError { code: "invalid_config", ..e })?;
    let session = store.create(config)?;
    Ok((StatusCode::CREATED, Json(session.view())).into_response())
}

async fn list(State(store): State<Shared>) -> impl IntoResponse {
    Json(store.list())
}

async fn import(State(store): State<Shared>, body: Bytes) -> Result<Response, ApiError> {
    let doc: ExportDoc = parse_body(&body)?;
    let session = store.import(doc)?;
    Ok((StatusCode::CREATED, Json(session.view())).into_response())
}

async fn show(State(store): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(store.get(&id)?.view()).into_response())
}

async fn respond(State(store): State<Shared>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let req: ResponseRequest = parse_body(&body)?;
    let reply = tokio::task::spawn_blocking(move || store.record(&id, &req))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(reply).into_response())
}

async fn what_if(State(store): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let session = store.get(&id)?;
    let w = tokio::task::spawn_blocking(move || session.what_if())
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(w).into_response())
}

fn parse_query(raw: &HashMap<String, String>) -> Result<EstimatesQuery, ApiError> {
    let num = |key: &str| -> Result<Option<f64>, ApiError> {
        match raw.get(key).map(|s| s.trim()).filter(|s| !s.is_empty()) {
            None => Ok(None),
            Some(s) => s
                .parse()
                .map(Some)
                .map_err(|_| ApiError::bad_request(format!("`{s}` is not a number")).with_field(key)),
        }
    };
    let ci = match raw.get("ci").map(|s| s.trim()).filter(|s| !s.is_empty()) {
        None => None,
        Some(s) => Some(
            CiOption::parse(s)
                .ok_or_else(|| ApiError::bad_request(format!("unknown interval method `{s}`")).with_field("ci"))?,
        ),
    };
    let estimators = raw
        .get("estimators")
        .map(|s| s.split(',').map(|e| e.trim().to_string()).filter(|e| !e.is_empty()).collect::<Vec<_>>())
        .filter(|v| !v.is_empty());
    Ok(EstimatesQuery {
        target: num("target")?,
        estimators,
        ci,
        conf: num("conf")?,
    })
}

async fn estimates(
    State(store): State<Shared>,
    Path(id): Path<String>,
    Query(raw): Query<HashMap<String, String>>,
) -> Result<Response, ApiError> {
    let q = parse_query(&raw)?;
    let session = store.get(&id)?;
    Ok(Json(session.estimates(&q)?).into_response())
}

async fn export(State(store): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let doc = store.get(&id)?.export();
    let body = serde_json::to_string_pretty(&doc).map_err(|e| ApiError::internal(e.to_string()))?;
    Ok((
        [
            (header::CONTENT_TYPE, "application/json".to_string()),
            (header::CONTENT_DISPOSITION, format!("attachment; filename=\"{id}.json\"")),
        ],
        body,
    )
        .into_response())
}
