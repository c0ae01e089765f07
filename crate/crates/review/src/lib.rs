//! Blinded reader-study service. Readers get sessions mixing cases they
//! dictated with cases dictated by others; candidate impressions are
//! served without any hint of who wrote them or how. Assessments are
//! stored in SQLite with an append-only audit trail and exported with
//! the unblinded labels for analysis.

pub mod api;
pub mod config;
pub mod domain;
pub mod export;
pub mod session;
pub mod store;

use std::sync::Arc;

use thiserror::Error;

pub use api::{router, AppState, StudySummary};
pub use config::{default_dimensions, Dimension, ServiceConfig};
pub use domain::{build_pool, read_pool_jsonl, CasePayload, NextCase, Origin, ReviewCase, ScoringSchema, Submission};
pub use export::{contrast, summarize, write_csv, ExportRow, GroupSummary, GROUPS};
pub use store::Store;

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid request: {0}")]
    Validation(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("case {0:?} has not been served yet")]
    NotServed(String),
    #[error("case pool too small: need {own_needed} own (have {own_available}), {other_needed} other (have {other_available})")]
    Shortage {
        own_needed: usize,
        own_available: usize,
        other_needed: usize,
        other_available: usize,
    },
    #[error("no assessments recorded")]
    EmptyStudy,
    #[error("missing or wrong bearer token")]
    Unauthorized,
    #[error("database: {0}")]
    Db(#[from] rusqlite::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("statistics: {0}")]
    Stats(#[from] impress_core::stats::StatsError),
    #[error("i/o: {0}")]
    Io(String),
}

/// Opens the store under the configured data directory.
pub fn open_state(config: ServiceConfig) -> Result<Arc<AppState>, ReviewError> {
    let store = Store::open(&config.db_path())?;
    Ok(AppState::new(store, config))
}

/// Serves until the listener fails or the task is cancelled.
pub async fn serve(state: Arc<AppState>, listener: tokio::net::TcpListener) -> Result<(), ReviewError> {
    let addr = listener.local_addr().map_err(|e| ReviewError::Io(e.to_string()))?;
    tracing::info!(%addr, "review service listening");
    axum::serve(listener, router(state))
        .await
        .map_err(|e| ReviewError::Io(e.to_string()))
}
