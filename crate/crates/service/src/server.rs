//! HTTP surface over [`Engine`].
//!
//! Every endpoint takes and returns JSON. Errors carry `{"error": {kind,
//! message, violations?}}` with status 400 (schema), 422 (domain), 502
//! (judge failure) or 504 (judge timeout).

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cac_core::bench::ReportFormat;
use serde::de::DeserializeOwned;
use serde::Serialize;
use tokio::sync::Semaphore;

use crate::engine::{to_body, ApiError, Engine, ErrorKind};

#[derive(Clone)]
struct AppState {
    engine: Arc<Engine>,
    permits: Arc<Semaphore>,
}

fn text_response(status: StatusCode, content_type: &'static str, body: String) -> Response {
    (status, [(header::CONTENT_TYPE, content_type)], body).into_response()
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        text_response(status, "application/json", self.body())
    }
}

fn json_ok<T: Serialize>(value: &T) -> Response {
    text_response(StatusCode::OK, "application/json", to_body(value))
}

fn parse<T: DeserializeOwned>(body: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    body.map(|Json(v)| v).map_err(|e| ApiError::bad_request(e.body_text()))
}

/// Runs blocking engine work on the blocking pool, within the concurrency limit.
async fn run<T, F>(state: &AppState, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&Engine) -> Result<T, ApiError> + Send + 'static,
{
    let _permit = state.permits.acquire().await.map_err(|e| ApiError::new(ErrorKind::Internal, e.to_string()))?;
    let engine = Arc::clone(&state.engine);
    tokio::task::spawn_blocking(move || f(&engine))
        .await
        .map_err(|e| ApiError::new(ErrorKind::Internal, format!("worker failed: {e}")))?
}

async fn healthz() -> Response {
    json_ok(&serde_json::json!({ "status": "ok", "version": cac_core::VERSION }))
}

macro_rules! json_endpoint {
    ($name:ident, $req:ty, $method:ident) => {
        async fn $name(State(state): State<AppState>, body: Result<Json<$req>, JsonRejection>) -> Response {
            let result = match parse(body) {
                Ok(req) => run(&state, move |e| e.$method(&req)).await,
                Err(e) => Err(e),
            };
            match result {
                Ok(v) => json_ok(&v),
                Err(e) => e.into_response(),
            }
        }
    };
}

json_endpoint!(reward, crate::engine::RewardRequest, reward);
json_endpoint!(rollouts_score, crate::engine::RolloutScoreRequest, rollout_score);
json_endpoint!(best_of_n, crate::engine::BestOfNRequest, best_of_n);
json_endpoint!(grpo_objective, crate::engine::ObjectiveRequest, grpo_objective);

async fn validate(
    State(state): State<AppState>,
    body: Result<Json<crate::engine::ValidateRequest>, JsonRejection>,
) -> Response {
    match parse(body) {
        Ok(req) => match run(&state, move |e| Ok(e.validate(&req))).await {
            Ok(v) => json_ok(&v),
            Err(e) => e.into_response(),
        },
        Err(e) => e.into_response(),
    }
}

async fn evaluate(
    State(state): State<AppState>,
    body: Result<Json<crate::engine::EvaluateRequest>, JsonRejection>,
) -> Response {
    let result = match parse(body) {
        Ok(req) => run(&state, move |e| e.evaluate(&req)).await,
        Err(e) => Err(e),
    };
    match result {
        Ok((format, text)) => {
            let content_type = match format {
                ReportFormat::Json => "application/json",
                ReportFormat::Csv => "text/csv",
                ReportFormat::Md => "text/markdown",
            };
            text_response(StatusCode::OK, content_type, text)
        }
        Err(e) => e.into_response(),
    }
}

async fn not_found() -> Response {
    let mut response = ApiError::bad_request("no such endpoint").into_response();
    *response.status_mut() = StatusCode::NOT_FOUND;
    response
}

pub fn router(engine: Arc<Engine>) -> Router {
    let permits = Arc::new(Semaphore::new(engine.config.concurrency));
    Router::new()
        .route("/healthz", get(healthz))
        .route("/v1/reward", post(reward))
        .route("/v1/rollouts/score", post(rollouts_score))
        .route("/v1/evaluate", post(evaluate))
        .route("/v1/validate", post(validate))
        .route("/v1/best-of-n", post(best_of_n))
        .route("/v1/grpo/objective", post(grpo_objective))
        .fallback(not_found)
        .with_state(AppState { engine, permits })
}

/// Serves until Ctrl-C.
pub async fn serve(engine: Arc<Engine>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(engine))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
