//! Core algorithms for an interactive image triage canvas: feature
//! extraction, PCA + t-SNE pre-clustering, a few-shot relation model for
//! auto-grouping, exemplar regression for auto-positioning and the
//! event-sourced session that ties them together.

pub mod canvas;
pub mod embedding;
pub mod error;
pub mod features;
pub mod fewshot;
pub mod layout;
pub mod linalg;
pub mod par;
pub mod session;
pub mod synthetic;

pub use canvas::{CanvasBounds, Point};
pub use error::{Error, Result};
pub use par::{CancelToken, Control, Exec};
