//! Event-sourced canvas state.
//!
//! A [`Session`] is an immutable [`InitialSnapshot`] (images, features,
//! pre-clustered layout) plus an append-only log of [`LogEntry`] records.
//! The live [`SessionState`] is always equal to replaying the active
//! batches of the log over the snapshot; undo appends a marker that
//! deactivates the most recent undoable batch.

mod events;
mod ops;
mod store;

pub use events::{Actor, Batch, Event, LogEntry};
pub use ops::{create_session, create_session_from_features, GridEntry, SessionConfig};
pub use store::{Journal, SessionStore};

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::canvas::{CanvasBounds, Point};
use crate::embedding::{KlCheckpoint, PcaModel};
use crate::error::{Error, Result};
use crate::features::{FeatureVector, Standardization};
use crate::fewshot::GroupScore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Initial,
    User,
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    pub features: FeatureVector,
    /// PCA coordinates (empty for single-image sessions).
    pub reduced: Vec<f64>,
    /// Raw 2D embedding before canvas scaling.
    pub embedding: Point,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanvasItem {
    pub image_id: String,
    pub position: Point,
    pub pinned: bool,
    pub group_id: Option<String>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub id: String,
    pub label: String,
    pub creation_index: u64,
    /// In insertion order.
    pub members: Vec<String>,
    /// Members placed by auto-grouping and not yet confirmed by the user.
    pub auto_members: Vec<String>,
    /// Assignment probability recorded for each auto member.
    pub auto_probability: BTreeMap<String, f64>,
}

impl Group {
    pub fn is_auto_member(&self, image_id: &str) -> bool {
        self.auto_members.iter().any(|m| m == image_id)
    }

    fn remove(&mut self, image_id: &str) {
        self.members.retain(|m| m != image_id);
        self.auto_members.retain(|m| m != image_id);
        self.auto_probability.remove(image_id);
    }
}

/// Everything fixed at session creation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialSnapshot {
    pub schema_version: u32,
    pub session_id: String,
    pub config: SessionConfig,
    pub images: Vec<ImageEntry>,
    pub positions: Vec<Point>,
    pub standardization: Option<Standardization>,
    pub pca: Option<PcaModel>,
    pub kl_trace: Vec<KlCheckpoint>,
    /// Whether features came from the configured extractor (vs. a feature file).
    pub extracted: bool,
}

/// State derived from the snapshot and the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub items: Vec<CanvasItem>,
    /// In creation order.
    pub groups: Vec<Group>,
    pub next_group_index: u64,
    pub threshold: f64,
    pub model_ref: Option<String>,
    /// Latest per-group probabilities from auto-grouping, per image.
    pub confidence: BTreeMap<String, Vec<GroupScore>>,
}

impl SessionState {
    fn initial(snap: &InitialSnapshot) -> Self {
        let items = snap
            .images
            .iter()
            .zip(&snap.positions)
            .map(|(img, &position)| CanvasItem {
                image_id: img.id.clone(),
                position,
                pinned: false,
                group_id: None,
                provenance: Provenance::Initial,
            })
            .collect();
        Self {
            items,
            groups: Vec::new(),
            next_group_index: 0,
            threshold: snap.config.threshold,
            model_ref: snap.config.model_ref.clone(),
            confidence: BTreeMap::new(),
        }
    }

    pub fn group(&self, id: &str) -> Option<&Group> {
        self.groups.iter().find(|g| g.id == id)
    }

    fn group_mut(&mut self, id: &str) -> Result<&mut Group> {
        self.groups
            .iter_mut()
            .find(|g| g.id == id)
            .ok_or_else(|| Error::not_found("group", id))
    }

    fn item_mut(&mut self, index: &HashMap<String, usize>, id: &str) -> Result<&mut CanvasItem> {
        let i = *index.get(id).ok_or_else(|| Error::not_found("image", id))?;
        Ok(&mut self.items[i])
    }

    fn detach(&mut self, index: &HashMap<String, usize>, image_id: &str) -> Result<()> {
        let item = self.item_mut(index, image_id)?;
        if let Some(g) = item.group_id.take() {
            self.group_mut(&g)?.remove(image_id);
        }
        Ok(())
    }

    /// Applies one event. Fails without partial effects on unknown ids.
    fn apply(&mut self, index: &HashMap<String, usize>, ev: &Event) -> Result<()> {
        match ev {
            Event::Moved { image_id, to, by } => {
                let item = self.item_mut(index, image_id)?;
                item.position = *to;
                match by {
                    Actor::User => {
                        item.provenance = Provenance::User;
                        item.pinned = true;
                    }
                    Actor::Auto => item.provenance = Provenance::Auto,
                }
            }
            Event::GroupCreated {
                group_id,
                label,
                creation_index,
            } => {
                if self.group(group_id).is_some() {
                    return Err(Error::invalid(format!("group `{group_id}` already exists")));
                }
                self.groups.push(Group {
                    id: group_id.clone(),
                    label: label.clone(),
                    creation_index: *creation_index,
                    members: Vec::new(),
                    auto_members: Vec::new(),
                    auto_probability: BTreeMap::new(),
                });
                self.next_group_index = self.next_group_index.max(creation_index + 1);
            }
            Event::GroupRenamed { group_id, label } => {
                self.group_mut(group_id)?.label = label.clone();
            }
            Event::GroupDeleted { group_id } => {
                let pos = self
                    .groups
                    .iter()
                    .position(|g| &g.id == group_id)
                    .ok_or_else(|| Error::not_found("group", group_id))?;
                let g = self.groups.remove(pos);
                for m in &g.members {
                    self.item_mut(index, m)?.group_id = None;
                }
                for scores in self.confidence.values_mut() {
                    scores.retain(|s| &s.group_id != group_id);
                }
            }
            Event::Assigned {
                image_id,
                group_id,
                by,
                probability,
            } => {
                self.group_mut(group_id)?;
                self.detach(index, image_id)?;
                self.item_mut(index, image_id)?.group_id = Some(group_id.clone());
                let g = self.group_mut(group_id)?;
                g.members.push(image_id.clone());
                if *by == Actor::Auto {
                    g.auto_members.push(image_id.clone());
                    if let Some(p) = probability {
                        g.auto_probability.insert(image_id.clone(), *p);
                    }
                }
            }
            Event::Unassigned { image_id } => self.detach(index, image_id)?,
            Event::ConfidenceRecorded { image_id, scores } => {
                self.item_mut(index, image_id)?;
                self.confidence.insert(image_id.clone(), scores.clone());
            }
            Event::ThresholdChanged { threshold } => self.threshold = *threshold,
            Event::ModelChanged { model_ref } => self.model_ref = model_ref.clone(),
        }
        Ok(())
    }
}

/// A live session: snapshot, derived state and log.
#[derive(Debug, Clone)]
pub struct Session {
    initial: Arc<InitialSnapshot>,
    index: Arc<HashMap<String, usize>>,
    state: SessionState,
    log: Vec<LogEntry>,
    next_batch: u64,
    journal: Option<Journal>,
}

impl PartialEq for Session {
    fn eq(&self, other: &Self) -> bool {
        self.initial == other.initial && self.state == other.state && self.log == other.log
    }
}

impl Session {
    pub fn from_snapshot(initial: InitialSnapshot) -> Result<Self> {
        if initial.images.len() != initial.positions.len() {
            return Err(Error::invalid("snapshot has mismatched image and position counts"));
        }
        let mut index = HashMap::with_capacity(initial.images.len());
        for (i, img) in initial.images.iter().enumerate() {
            if index.insert(img.id.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate image id `{}`", img.id)));
            }
        }
        let state = SessionState::initial(&initial);
        Ok(Self {
            initial: Arc::new(initial),
            index: Arc::new(index),
            state,
            log: Vec::new(),
            next_batch: 0,
            journal: None,
        })
    }

    /// Rebuilds a session by replaying `log` over `initial`.
    pub fn replay(initial: InitialSnapshot, log: Vec<LogEntry>) -> Result<Self> {
        let mut s = Self::from_snapshot(initial)?;
        s.state = s.replay_state(&log)?;
        s.next_batch = log.iter().map(LogEntry::batch_id).max().map_or(0, |b| b + 1);
        s.log = log;
        Ok(s)
    }

    fn replay_state(&self, log: &[LogEntry]) -> Result<SessionState> {
        let mut state = SessionState::initial(&self.initial);
        for b in active_batches(log) {
            for ev in &b.events {
                state.apply(&self.index, ev)?;
            }
        }
        Ok(state)
    }

    /// Replays the log from scratch and compares with the live state.
    pub fn verify_replay(&self) -> Result<bool> {
        Ok(self.replay_state(&self.log)? == self.state)
    }

    pub fn id(&self) -> &str {
        &self.initial.session_id
    }

    pub fn initial(&self) -> &InitialSnapshot {
        &self.initial
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn config(&self) -> &SessionConfig {
        &self.initial.config
    }

    pub fn canvas(&self) -> CanvasBounds {
        self.initial.config.canvas
    }

    pub fn image(&self, id: &str) -> Option<&ImageEntry> {
        self.index.get(id).map(|&i| &self.initial.images[i])
    }

    pub fn item(&self, id: &str) -> Option<&CanvasItem> {
        self.index.get(id).map(|&i| &self.state.items[i])
    }

    pub fn attach_journal(&mut self, journal: Journal) {
        self.journal = Some(journal);
    }

    pub fn detach_journal(&mut self) -> Option<Journal> {
        self.journal.take()
    }

    /// Validates and applies a batch atomically, journaling it first.
    /// Returns the batch id, or `None` when `events` is empty.
    fn commit(&mut self, events: Vec<Event>, undoable: bool) -> Result<Option<u64>> {
        if events.is_empty() {
            return Ok(None);
        }
        let mut next = self.state.clone();
        for ev in &events {
            next.apply(&self.index, ev)?;
        }
        let entry = LogEntry::Batch(Batch {
            batch: self.next_batch,
            undoable,
            events,
        });
        if let Some(j) = &mut self.journal {
            j.append(&entry)?;
        }
        self.state = next;
        self.log.push(entry);
        self.next_batch += 1;
        Ok(Some(self.next_batch - 1))
    }

    /// Reverts the most recent undoable batch still in effect. Returns the
    /// reverted batch id, or `None` if there was nothing to undo.
    pub fn undo(&mut self) -> Result<Option<u64>> {
        let Some(target) = active_batches(&self.log)
            .into_iter()
            .rev()
            .find(|b| b.undoable)
            .map(|b| b.batch)
        else {
            return Ok(None);
        };
        let entry = LogEntry::Undo {
            batch: self.next_batch,
            target,
        };
        let mut log = self.log.clone();
        log.push(entry.clone());
        let state = self.replay_state(&log)?;
        if let Some(j) = &mut self.journal {
            j.append(&entry)?;
        }
        self.log = log;
        self.state = state;
        self.next_batch += 1;
        Ok(Some(target))
    }
}

/// Batches still in effect, in log order.
pub fn active_batches(log: &[LogEntry]) -> Vec<&Batch> {
    let undone: std::collections::HashSet<u64> = log
        .iter()
        .filter_map(|e| match e {
            LogEntry::Undo { target, .. } => Some(*target),
            LogEntry::Batch(_) => None,
        })
        .collect();
    log.iter()
        .filter_map(|e| match e {
            LogEntry::Batch(b) if !undone.contains(&b.batch) => Some(b),
            _ => None,
        })
        .collect()
}
