//! JSON request and response bodies.

use std::collections::BTreeMap;

use pilesort_core::fewshot::{Assignment, GroupScore, Heatmap};
use pilesort_core::layout::Suggestion;
use pilesort_core::session::{CanvasItem, GridEntry, Group, Session};
use pilesort_core::{CanvasBounds, Point};
use serde::{Deserialize, Serialize};

/// Version of every JSON body this service emits.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub schema_version: u32,
    pub session_id: String,
    pub canvas: CanvasBounds,
    pub threshold: f64,
    pub model_ref: Option<String>,
    /// Number of log entries; increases with every accepted mutation.
    pub revision: usize,
    pub items: Vec<CanvasItem>,
    pub groups: Vec<Group>,
    /// Latest recorded per-group probabilities for each image.
    pub probabilities: BTreeMap<String, Vec<GroupScore>>,
    pub suggestions: Vec<Suggestion>,
}

impl SessionView {
    pub fn of(s: &Session) -> Self {
        let st = s.state();
        Self {
            schema_version: SCHEMA_VERSION,
            session_id: s.id().to_string(),
            canvas: s.canvas(),
            threshold: st.threshold,
            model_ref: st.model_ref.clone(),
            revision: s.log().len(),
            items: st.items.clone(),
            groups: st.groups.clone(),
            probabilities: st.confidence.clone(),
            suggestions: s.suggestions(),
        }
    }
}

/// One interactive edit, tagged by `op`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Command {
    Move { image_id: String, x: f64, y: f64 },
    CreateGroup { label: String },
    RenameGroup { group_id: String, label: String },
    DeleteGroup { group_id: String },
    Assign { image_id: String, group_id: String },
    Unassign { image_id: String },
    SetThreshold { threshold: f64 },
    Undo,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub group_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub suggestions: Option<Vec<Suggestion>>,
    /// Batch reverted by an undo; absent when there was nothing to undo.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub undone_batch: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandResponse {
    pub schema_version: u32,
    pub outcome: Outcome,
    pub state: SessionView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoGroupResponse {
    pub schema_version: u32,
    pub assignments: Vec<Assignment>,
    pub state: SessionView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovedItem {
    pub image_id: String,
    pub position: Point,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoPositionResponse {
    pub schema_version: u32,
    pub moved: Vec<MovedItem>,
    pub state: SessionView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResponse {
    pub schema_version: u32,
    pub entries: Vec<GridEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapResponse {
    pub schema_version: u32,
    pub image_id: String,
    pub group_id: String,
    pub heatmap: Heatmap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobAccepted {
    pub schema_version: u32,
    pub job_id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub session_id: Option<String>,
}

/// `POST /sessions` JSON body. Exactly one source must be given.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CreateSessionRequest {
    pub session_id: Option<String>,
    /// Directory of images on the server (searched recursively).
    pub dataset: Option<String>,
    /// Precomputed feature file on the server.
    pub features: Option<String>,
    pub seed: Option<u64>,
    pub threshold: Option<f64>,
    pub extractor: Option<String>,
    pub canvas: Option<CanvasBounds>,
}

/// `POST /train` JSON body.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRequest {
    pub dataset: String,
    /// Output file name inside the model directory.
    pub out: Option<String>,
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub hidden: Option<usize>,
    pub seed: Option<u64>,
    pub extractor: Option<String>,
    /// Make the trained model the server default once done.
    pub activate: Option<bool>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct HeatmapQuery {
    pub group: String,
    #[serde(default = "default_patch")]
    pub patch: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
}

fn default_patch() -> usize {
    16
}

fn default_stride() -> usize {
    8
}
