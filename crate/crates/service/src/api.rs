//! HTTP routes.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;

use crate::error::ServiceError;
use crate::registry::Registry;
use crate::session::{OutcomeInput, TrialConfig};

#[derive(Clone)]
pub struct AppState {
    pub registry: Arc<Registry>,
    /// Static bearer token required on every route but `/healthz`.
    pub token: Option<Arc<str>>,
}

pub fn router(state: AppState) -> Router {
    let trials = Router::new()
        .route("/trials", post(create_trial))
        .route("/trials/{id}", get(get_trial))
        .route("/trials/{id}/outcomes", post(record_outcome))
        .route("/trials/{id}/recommendation", get(recommendation))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/healthz", get(healthz))
        .merge(trials)
        .with_state(state)
}

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|v| v == &**token);
        if !ok {
            return ServiceError::Unauthorized.into_response();
        }
    }
    next.run(req).await
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ServiceError> {
    serde_json::from_slice(body).map_err(|e| ServiceError::Validation {
        field: None,
        message: format!("invalid request body: {e}"),
    })
}

/// Runs engine work off the async workers.
async fn blocking<T, F>(f: F) -> Result<T, ServiceError>
where
    F: FnOnce() -> Result<T, ServiceError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Storage(format!("worker failed: {e}")))?
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn create_trial(State(state): State<AppState>, body: Bytes) -> Result<Response, ServiceError> {
    let config: TrialConfig = parse(&body)?;
    let registry = state.registry.clone();
    let view = blocking(move || registry.create_trial(config)).await?;
    Ok((StatusCode::CREATED, Json(&*view)).into_response())
}

async fn get_trial(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    Ok(Json(&*state.registry.get(&id)?).into_response())
}

async fn record_outcome(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ServiceError> {
    let input: OutcomeInput = parse(&body)?;
    let registry = state.registry.clone();
    let response = blocking(move || registry.record_outcome(&id, input)).await?;
    Ok(Json(response).into_response())
}

async fn recommendation(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    Ok(Json(state.registry.recommendation(&id)?).into_response())
}
