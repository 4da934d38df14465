//! HTTP service around `pilesort-core`: dataset ingestion, session
//! persistence, background jobs and the JSON API.

pub mod api;
pub mod app;
pub mod config;
pub mod error;
pub mod ingest;
pub mod jobs;
pub mod wire;

pub use app::AppState;
pub use config::ServiceConfig;
pub use error::{Result, ServiceError};
