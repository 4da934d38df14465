use serde::{Deserialize, Serialize};

use crate::canvas::Point;
use crate::fewshot::GroupScore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Actor {
    User,
    Auto,
}

/// A state change. Events carry outcomes, never commands, so replay needs
/// neither the model nor the regressor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Moved {
        image_id: String,
        to: Point,
        by: Actor,
    },
    GroupCreated {
        group_id: String,
        label: String,
        creation_index: u64,
    },
    GroupRenamed {
        group_id: String,
        label: String,
    },
    GroupDeleted {
        group_id: String,
    },
    Assigned {
        image_id: String,
        group_id: String,
        by: Actor,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        probability: Option<f64>,
    },
    Unassigned {
        image_id: String,
    },
    ConfidenceRecorded {
        image_id: String,
        scores: Vec<GroupScore>,
    },
    ThresholdChanged {
        threshold: f64,
    },
    ModelChanged {
        model_ref: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub batch: u64,
    pub undoable: bool,
    pub events: Vec<Event>,
}

/// One line of the persisted event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "entry", rename_all = "snake_case")]
pub enum LogEntry {
    Batch(Batch),
    Undo { batch: u64, target: u64 },
}

impl LogEntry {
    pub fn batch_id(&self) -> u64 {
        match self {
            LogEntry::Batch(b) => b.batch,
            LogEntry::Undo { batch, .. } => *batch,
        }
    }
}
