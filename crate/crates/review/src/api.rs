//! HTTP+JSON routes.

use std::sync::Arc;

use axum::extract::{Path, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use impress_core::stats::BootstrapConfig;

use crate::config::ServiceConfig;
use crate::domain::{ReviewCase, ScoringSchema, Submission};
use crate::export::{contrast, summarize, write_csv, GroupContrast, GroupSummary};
use crate::store::Store;
use crate::ReviewError;

pub struct AppState {
    pub store: Store,
    pub config: ServiceConfig,
    pub schema: ScoringSchema,
}

impl AppState {
    pub fn new(store: Store, config: ServiceConfig) -> Arc<Self> {
        let schema = ScoringSchema::new(&config.dimensions);
        Arc::new(AppState { store, config, schema })
    }

    fn bootstrap(&self) -> BootstrapConfig {
        BootstrapConfig {
            trials: self.config.bootstrap_trials,
            seed: self.config.bootstrap_seed,
            ..Default::default()
        }
    }
}

type Shared = Arc<AppState>;

#[derive(Debug, Serialize, Deserialize)]
struct ErrorBody {
    error: String,
    detail: String,
}

impl IntoResponse for ReviewError {
    fn into_response(self) -> Response {
        let (status, kind) = match &self {
            ReviewError::Validation(_) => (StatusCode::UNPROCESSABLE_ENTITY, "validation"),
            ReviewError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            ReviewError::NotServed(_) => (StatusCode::CONFLICT, "not_served"),
            ReviewError::Shortage { .. } => (StatusCode::CONFLICT, "shortage"),
            ReviewError::EmptyStudy => (StatusCode::CONFLICT, "empty_study"),
            ReviewError::Unauthorized => (StatusCode::UNAUTHORIZED, "unauthorized"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        if status.is_server_error() {
            tracing::error!(error = %self, "request failed");
        }
        let body = ErrorBody {
            error: kind.into(),
            detail: self.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

async fn blocking<T: Send + 'static>(
    state: &Shared,
    f: impl FnOnce(&AppState) -> Result<T, ReviewError> + Send + 'static,
) -> Result<T, ReviewError> {
    let s = state.clone();
    tokio::task::spawn_blocking(move || f(&s))
        .await
        .map_err(|e| ReviewError::Io(format!("worker: {e}")))?
}

#[derive(Debug, Deserialize)]
struct CreateSession {
    reader_id: String,
    n_own: Option<usize>,
    n_other: Option<usize>,
    seed: Option<u64>,
}

async fn create_session(State(state): State<Shared>, Json(req): Json<CreateSession>) -> Result<impl IntoResponse, ReviewError> {
    let created = blocking(&state, move |s| {
        s.store.create_session(
            &req.reader_id,
            req.n_own.unwrap_or(s.config.n_own),
            req.n_other.unwrap_or(s.config.n_other),
            req.seed.unwrap_or(0),
        )
    })
    .await?;
    Ok((StatusCode::CREATED, Json(created)))
}

async fn next_case(State(state): State<Shared>, Path(id): Path<String>) -> Result<impl IntoResponse, ReviewError> {
    Ok(Json(blocking(&state, move |s| s.store.next_case(&id, &s.schema)).await?))
}

async fn progress(State(state): State<Shared>, Path(id): Path<String>) -> Result<impl IntoResponse, ReviewError> {
    Ok(Json(blocking(&state, move |s| s.store.progress(&id)).await?))
}

async fn submit(
    State(state): State<Shared>,
    Path(id): Path<String>,
    Json(sub): Json<Submission>,
) -> Result<impl IntoResponse, ReviewError> {
    Ok(Json(
        blocking(&state, move |s| s.store.submit(&id, &sub, &s.config.dimensions)).await?,
    ))
}

async fn add_cases(State(state): State<Shared>, Json(cases): Json<Vec<ReviewCase>>) -> Result<impl IntoResponse, ReviewError> {
    let added = blocking(&state, move |s| s.store.add_cases(&cases)).await?;
    Ok(Json(serde_json::json!({ "added": added })))
}

async fn schema(State(state): State<Shared>) -> impl IntoResponse {
    Json(state.schema.clone())
}

async fn export_csv(State(state): State<Shared>) -> Result<impl IntoResponse, ReviewError> {
    let body = blocking(&state, |s| {
        let rows = s.store.export_rows()?;
        if rows.is_empty() {
            return Err(ReviewError::EmptyStudy);
        }
        let mut buf = Vec::new();
        write_csv(&rows, &s.config.dimensions, &mut buf)?;
        Ok(buf)
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], body))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StudySummary {
    pub rows: usize,
    pub groups: Vec<GroupSummary>,
    pub contrasts: Vec<GroupContrast>,
}

/// Utility contrasts between the groups that have assessments.
const CONTRASTS: [(&str, &str); 3] = [("llm_own", "orig_own"), ("llm_own", "orig_other"), ("orig_own", "orig_other")];

async fn export_summary(State(state): State<Shared>) -> Result<impl IntoResponse, ReviewError> {
    let summary = blocking(&state, |s| {
        let rows = s.store.export_rows()?;
        let cfg = s.bootstrap();
        let groups = summarize(&rows, &s.config.dimensions, cfg)?;
        let contrasts = CONTRASTS
            .iter()
            .filter_map(|(a, b)| contrast(&rows, a, b, "utility", cfg).ok())
            .collect();
        Ok(StudySummary {
            rows: rows.len(),
            groups,
            contrasts,
        })
    })
    .await?;
    Ok(Json(summary))
}

async fn require_token(State(state): State<Shared>, headers: HeaderMap, req: Request, next: Next) -> Response {
    if let Some(token) = &state.config.token {
        let expected = format!("Bearer {token}");
        let ok = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .is_some_and(|v| v == expected);
        if !ok {
            return ReviewError::Unauthorized.into_response();
        }
    }
    next.run(req).await
}

pub fn router(state: Shared) -> Router {
    let api = Router::new()
        .route("/schema", get(schema))
        .route("/cases", post(add_cases))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(progress))
        .route("/sessions/{id}/next", get(next_case))
        .route("/sessions/{id}/assessments", post(submit))
        .route("/export", get(export_csv))
        .route("/export/summary", get(export_summary))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .nest("/api", api)
        .with_state(state)
}
