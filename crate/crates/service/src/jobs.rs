//! Background job registry: status tracking, cancellation and the global
//! training queue.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use pilesort_core::{CancelToken, Control, Exec};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::error::{Result, ServiceError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Embed,
    Train,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
    Cancelled,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed | JobState::Cancelled)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub job_id: String,
    pub kind: JobKind,
    pub state: JobState,
    pub progress: f64,
    pub message: Option<String>,
    pub session_id: Option<String>,
}

struct Entry {
    status: JobStatus,
    cancel: CancelToken,
}

#[derive(Default)]
struct Inner {
    next: u64,
    jobs: HashMap<String, Entry>,
    /// Non-terminal job per (session, kind).
    active: HashMap<(String, JobKind), String>,
}

/// Handed to a job body: progress reporting and cooperative cancellation.
#[derive(Clone)]
pub struct JobHandle {
    pub id: String,
    registry: Arc<JobRegistry>,
    cancel: CancelToken,
}

impl JobHandle {
    /// A [`Control`] wired to this job's cancel flag and progress.
    pub fn control(&self, exec: Exec) -> Control {
        let reg = self.registry.clone();
        let id = self.id.clone();
        Control::new(exec)
            .with_cancel(self.cancel.clone())
            .with_progress(move |p| reg.set_progress(&id, p))
    }

    pub fn is_cancelled(&self) -> bool {
        self.cancel.is_cancelled()
    }

    pub fn set_progress(&self, p: f64) {
        self.registry.set_progress(&self.id, p);
    }
}

pub struct JobRegistry {
    inner: Mutex<Inner>,
    training: Arc<Semaphore>,
}

impl Default for JobRegistry {
    fn default() -> Self {
        Self {
            inner: Mutex::default(),
            training: Arc::new(Semaphore::new(1)),
        }
    }
}

/// Outcome of a job body: a message on success.
pub type JobResult = pilesort_core::Result<String>;

impl JobRegistry {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Registers and starts a job on the blocking pool. Session jobs are
    /// limited to one live job per kind; training jobs run one at a time in
    /// submission order.
    pub fn submit<F>(self: &Arc<Self>, kind: JobKind, session: Option<String>, work: F) -> Result<String>
    where
        F: FnOnce(&JobHandle) -> JobResult + Send + 'static,
    {
        let handle = {
            let mut inner = self.lock();
            if let Some(s) = &session {
                if let Some(existing) = inner.active.get(&(s.clone(), kind)) {
                    return Err(ServiceError::Conflict(format!(
                        "a {kind:?} job ({existing}) is already running for session `{s}`"
                    )));
                }
            }
            inner.next += 1;
            let id = format!("job-{}", inner.next);
            let cancel = CancelToken::new();
            inner.jobs.insert(
                id.clone(),
                Entry {
                    status: JobStatus {
                        job_id: id.clone(),
                        kind,
                        state: JobState::Queued,
                        progress: 0.0,
                        message: None,
                        session_id: session.clone(),
                    },
                    cancel: cancel.clone(),
                },
            );
            if let Some(s) = &session {
                inner.active.insert((s.clone(), kind), id.clone());
            }
            JobHandle {
                id,
                registry: self.clone(),
                cancel,
            }
        };
        let id = handle.id.clone();
        let queue = (kind == JobKind::Train).then(|| self.training.clone());
        tokio::spawn(async move {
            let _permit = match queue {
                Some(q) => Some(q.acquire_owned().await.expect("queue never closed")),
                None => None,
            };
            if handle.is_cancelled() {
                handle.registry.finish(&handle.id, Err(pilesort_core::Error::Cancelled));
                return;
            }
            handle.registry.set_state(&handle.id, JobState::Running);
            let h = handle.clone();
            let outcome = tokio::task::spawn_blocking(move || work(&h))
                .await
                .unwrap_or_else(|e| Err(pilesort_core::Error::Precondition(format!("job panicked: {e}"))));
            handle.registry.finish(&handle.id, outcome);
        });
        Ok(id)
    }

    fn set_state(&self, id: &str, state: JobState) {
        let mut inner = self.lock();
        if let Some(e) = inner.jobs.get_mut(id) {
            if !e.status.state.is_terminal() {
                e.status.state = state;
            }
        }
    }

    fn set_progress(&self, id: &str, p: f64) {
        let mut inner = self.lock();
        if let Some(e) = inner.jobs.get_mut(id) {
            if !e.status.state.is_terminal() && p.is_finite() {
                e.status.progress = e.status.progress.max(p.clamp(0.0, 1.0));
            }
        }
    }

    fn finish(&self, id: &str, outcome: JobResult) {
        let mut inner = self.lock();
        let Some(e) = inner.jobs.get_mut(id) else { return };
        if e.status.state.is_terminal() {
            return;
        }
        match outcome {
            Ok(msg) => {
                e.status.state = JobState::Done;
                e.status.progress = 1.0;
                e.status.message = Some(msg);
            }
            Err(pilesort_core::Error::Cancelled) => {
                e.status.state = JobState::Cancelled;
                e.status.message = Some("cancelled".into());
            }
            Err(err) => {
                tracing::warn!("job {id} failed: {err}");
                e.status.state = JobState::Failed;
                e.status.message = Some(err.to_string());
            }
        }
        let key = e.status.session_id.clone().map(|s| (s, e.status.kind));
        if let Some(key) = key {
            if inner.active.get(&key).is_some_and(|a| a == id) {
                inner.active.remove(&key);
            }
        }
    }

    pub fn status(&self, id: &str) -> Option<JobStatus> {
        self.lock().jobs.get(id).map(|e| e.status.clone())
    }

    /// Requests cancellation. The job reports `cancelled` once its body
    /// notices (queued jobs never start).
    pub fn cancel(&self, id: &str) -> Option<JobStatus> {
        let inner = self.lock();
        let e = inner.jobs.get(id)?;
        if !e.status.state.is_terminal() {
            e.cancel.cancel();
        }
        Some(e.status.clone())
    }

    /// Live job of `kind` for `session`, if any.
    pub fn active(&self, session: &str, kind: JobKind) -> Option<String> {
        self.lock().active.get(&(session.to_string(), kind)).cloned()
    }

    /// Polls until the job reaches a terminal state.
    pub async fn wait(&self, id: &str) -> Option<JobStatus> {
        loop {
            let s = self.status(id)?;
            if s.state.is_terminal() {
                return Some(s);
            }
            tokio::time::sleep(Duration::from_millis(5)).await;
        }
    }
}
