//! Live trial conduct over HTTP.
//!
//! A [`Store`] owns the sessions. Every session is persisted as an
//! append-only JSON-lines event log, with a periodic snapshot beside it, so
//! its state can always be rebuilt by replaying the events.
//! [`router`] exposes the JSON API.

mod api;
mod clock;
mod config;
mod error;
mod session;
mod store;

pub use api::router;
pub use clock::{Clock, FixedClock, Ids, RandomIds, SequentialIds, SystemClock};
pub use config::TrialConfig;
pub use error::ApiError;
pub use session::{
    Branch, Diagnostics, EstimateEntry, EstimatesQuery, EstimatesReport, Event, ExportDoc, Outcome, PosteriorDiag,
    Recommendation, RecordReply, ResponseRequest, Session, SessionStatus, SessionView, TrialView, WhatIf,
};
pub use store::{SessionSummary, Store};

/// Serves the API on `addr`, persisting sessions under `data_dir`.
pub async fn serve(addr: std::net::SocketAddr, data_dir: std::path::PathBuf) -> std::io::Result<()> {
    let store = Store::open(data_dir, std::sync::Arc::new(SystemClock), std::sync::Arc::new(RandomIds))
        .map_err(std::io::Error::other)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(std::sync::Arc::new(store))).await
}
