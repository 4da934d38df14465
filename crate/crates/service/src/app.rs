//! Shared server state and every operation the HTTP layer exposes. Methods
//! are synchronous and may block; the router runs them on the blocking pool.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use pilesort_core::features::{load_precomputed_features, ExtractorSpec, ImageRecord};
use pilesort_core::fewshot::{
    occlusion_heatmap, read_model_file, train_with, write_model_file, RelationModel, TrainConfig, DEFAULT_HIDDEN,
};
use pilesort_core::session::{create_session, create_session_from_features, Actor, Session, SessionConfig, SessionStore};
use pilesort_core::{Control, Exec};

use crate::config::ServiceConfig;
use crate::error::{Result, ServiceError};
use crate::ingest::{decode_image, ingest_dataset, load_image, load_image_tree};
use crate::jobs::{JobKind, JobRegistry};
use crate::wire::{
    AutoGroupResponse, AutoPositionResponse, Command, CommandResponse, CreateSessionRequest, GridResponse,
    HeatmapQuery, HeatmapResponse, MovedItem, Outcome, SessionView, TrainRequest, SCHEMA_VERSION,
};

const SOURCES: &str = "sources.json";
const UPLOADS: &str = "images";
const MAX_ID_LEN: usize = 64;

pub type SessionSlot = Arc<Mutex<Session>>;

/// Where a new session's images come from.
#[derive(Debug, Clone)]
pub enum SessionSource {
    /// Image directory on the server, searched recursively.
    Dataset(PathBuf),
    /// Precomputed feature file on the server.
    Features(PathBuf),
    /// Uploaded files as `(file name, bytes)`.
    Uploaded(Vec<(String, Vec<u8>)>),
}

pub struct AppState {
    pub config: ServiceConfig,
    pub store: SessionStore,
    pub jobs: Arc<JobRegistry>,
    pub exec: Exec,
    models_dir: PathBuf,
    sessions: RwLock<HashMap<String, SessionSlot>>,
    pending: Mutex<HashSet<String>>,
    default_model: RwLock<Option<Arc<RelationModel>>>,
    model_cache: Mutex<HashMap<String, Arc<RelationModel>>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

pub fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= MAX_ID_LEN
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

fn parse_extractor(s: Option<&str>, default: ExtractorSpec) -> Result<ExtractorSpec> {
    match s {
        Some(s) => Ok(s.parse()?),
        None => Ok(default),
    }
}

impl AppState {
    /// Opens the data directory, replays every persisted session and loads
    /// the configured default model.
    pub fn open(config: ServiceConfig) -> Result<Arc<Self>> {
        let store = SessionStore::open(config.data_dir.join("sessions"))?;
        let models_dir = config.data_dir.join("models");
        std::fs::create_dir_all(&models_dir).map_err(|e| pilesort_core::Error::Io {
            path: models_dir.clone(),
            source: e,
        })?;
        let mut sessions = HashMap::new();
        for s in store.load_all()? {
            sessions.insert(s.id().to_string(), Arc::new(Mutex::new(s)));
        }
        tracing::info!("loaded {} sessions from {}", sessions.len(), store.root().display());
        let default_model = match &config.model {
            Some(p) => Some(Arc::new(read_model_file(p)?)),
            None => None,
        };
        Ok(Arc::new(Self {
            config,
            store,
            jobs: JobRegistry::new(),
            exec: Exec::default(),
            models_dir,
            sessions: RwLock::new(sessions),
            pending: Mutex::default(),
            default_model: RwLock::new(default_model),
            model_cache: Mutex::default(),
        }))
    }

    pub fn models_dir(&self) -> &Path {
        &self.models_dir
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.read().unwrap_or_else(|p| p.into_inner()).keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn session(&self, id: &str) -> Result<SessionSlot> {
        if let Some(s) = self.sessions.read().unwrap_or_else(|p| p.into_inner()).get(id) {
            return Ok(s.clone());
        }
        if lock(&self.pending).contains(id) {
            return Err(ServiceError::Conflict(format!("session `{id}` is still being prepared")));
        }
        Err(ServiceError::not_found("session", id))
    }

    /// Persists a freshly built session and makes it available.
    pub fn insert_session(&self, mut session: Session) -> Result<()> {
        self.store.persist(&mut session)?;
        let id = session.id().to_string();
        self.sessions
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .insert(id, Arc::new(Mutex::new(session)));
        Ok(())
    }

    pub fn session_config(&self, req: &CreateSessionRequest) -> Result<SessionConfig> {
        let mut c = SessionConfig {
            threshold: req.threshold.unwrap_or(self.config.threshold),
            seed: req.seed.unwrap_or(self.config.seed),
            extractor: parse_extractor(req.extractor.as_deref(), self.config.extractor)?,
            ..SessionConfig::default()
        };
        if let Some(canvas) = req.canvas {
            c.canvas = canvas;
        }
        Ok(c)
    }

    fn reserve_id(&self, requested: Option<String>) -> Result<String> {
        let existing: HashSet<String> = self.session_ids().into_iter().collect();
        let mut pending = lock(&self.pending);
        let id = match requested {
            Some(id) => {
                if !valid_id(&id) {
                    return Err(ServiceError::BadRequest(format!(
                        "session id `{id}` must be 1-{MAX_ID_LEN} characters of [A-Za-z0-9._-]"
                    )));
                }
                if existing.contains(&id) || pending.contains(&id) || self.store.session_dir(&id).exists() {
                    return Err(ServiceError::Conflict(format!("session `{id}` already exists")));
                }
                id
            }
            None => (1..)
                .map(|k| format!("s{k}"))
                .find(|id| !existing.contains(id) && !pending.contains(id) && !self.store.session_dir(id).exists())
                .expect("unbounded"),
        };
        pending.insert(id.clone());
        Ok(id)
    }

    /// Starts the pre-clustering job for a new session. Returns the session
    /// id and the job id; the session appears once the job is done.
    pub fn create_session_job(
        self: &Arc<Self>,
        requested_id: Option<String>,
        source: SessionSource,
        config: SessionConfig,
    ) -> Result<(String, String)> {
        if let SessionSource::Uploaded(files) = &source {
            let mut seen = HashSet::new();
            for (name, _) in files {
                if !valid_id(name) {
                    return Err(ServiceError::BadRequest(format!("invalid upload file name `{name}`")));
                }
                if !seen.insert(name) {
                    return Err(ServiceError::BadRequest(format!("duplicate upload `{name}`")));
                }
            }
        }
        let id = self.reserve_id(requested_id)?;
        let app = self.clone();
        let sid = id.clone();
        let submitted = self.jobs.submit(JobKind::Embed, Some(id.clone()), move |job| {
            let ctl = job.control(app.exec);
            let result = app.build_session(&sid, source, config, &ctl);
            if result.is_err() {
                let dir = app.store.session_dir(&sid);
                if !dir.join("initial.json").exists() {
                    let _ = std::fs::remove_dir_all(&dir);
                }
            }
            lock(&app.pending).remove(&sid);
            result
        });
        match submitted {
            Ok(job) => Ok((id, job)),
            Err(e) => {
                lock(&self.pending).remove(&id);
                Err(e)
            }
        }
    }

    fn build_session(&self, id: &str, source: SessionSource, config: SessionConfig, ctl: &Control) -> pilesort_core::Result<String> {
        let dir = self.store.session_dir(id);
        let io = |path: &Path, e: std::io::Error| pilesort_core::Error::Io {
            path: path.to_path_buf(),
            source: e,
        };
        let (session, sources, skipped) = match source {
            SessionSource::Features(path) => {
                let rows = load_precomputed_features(&path)?.into_iter().collect();
                (create_session_from_features(id, rows, config, ctl)?, BTreeMap::new(), 0)
            }
            SessionSource::Dataset(root) => {
                let (images, skipped) = load_image_tree(&root, ctl.exec).map_err(to_core)?;
                let sources = images.iter().map(|i| (i.id.clone(), root.join(&i.id))).collect();
                (create_session(id, &images, config, ctl)?, sources, skipped.len())
            }
            SessionSource::Uploaded(files) => {
                let upload_dir = dir.join(UPLOADS);
                std::fs::create_dir_all(&upload_dir).map_err(|e| io(&upload_dir, e))?;
                let mut images: Vec<ImageRecord> = Vec::new();
                let mut sources = BTreeMap::new();
                let mut skipped = 0;
                for (name, bytes) in files {
                    match decode_image(&bytes, name.clone()) {
                        Ok(img) => {
                            let path = upload_dir.join(&name);
                            std::fs::write(&path, &bytes).map_err(|e| io(&path, e))?;
                            sources.insert(name, path);
                            images.push(img);
                        }
                        Err(e) => {
                            tracing::warn!("skipping upload {name}: {e}");
                            skipped += 1;
                        }
                    }
                }
                (create_session(id, &images, config, ctl)?, sources, skipped)
            }
        };
        ctl.check()?;
        std::fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
        let src_path = dir.join(SOURCES);
        std::fs::write(&src_path, serde_json::to_vec(&sources)?).map_err(|e| io(&src_path, e))?;
        let n = session.initial().images.len();
        self.insert_session(session).map_err(to_core)?;
        Ok(format!("{n} images placed, {skipped} skipped"))
    }

    pub fn view(&self, id: &str) -> Result<SessionView> {
        let slot = self.session(id)?;
        let s = lock(&slot);
        Ok(SessionView::of(&s))
    }

    pub fn apply(&self, id: &str, cmd: Command) -> Result<CommandResponse> {
        let slot = self.session(id)?;
        let mut s = lock(&slot);
        let outcome = apply_command(&mut s, cmd)?;
        Ok(CommandResponse {
            schema_version: SCHEMA_VERSION,
            outcome,
            state: SessionView::of(&s),
        })
    }

    pub fn set_default_model(&self, model: Option<Arc<RelationModel>>) {
        *self.default_model.write().unwrap_or_else(|p| p.into_inner()) = model;
    }

    pub fn default_model(&self) -> Option<Arc<RelationModel>> {
        self.default_model.read().unwrap_or_else(|p| p.into_inner()).clone()
    }

    /// Model a session should use: its own fine-tuned model if it has one,
    /// otherwise the server default.
    pub fn model_for(&self, session: &Session) -> Result<Arc<RelationModel>> {
        match &session.state().model_ref {
            Some(name) => self.load_model(name),
            None => self.default_model().ok_or_else(|| {
                ServiceError::Core(pilesort_core::Error::Precondition(
                    "no relation model loaded: train one first (POST /train or `pilesort train`)".into(),
                ))
            }),
        }
    }

    fn load_model(&self, name: &str) -> Result<Arc<RelationModel>> {
        if let Some(m) = lock(&self.model_cache).get(name) {
            return Ok(m.clone());
        }
        if !valid_id(name) {
            return Err(ServiceError::BadRequest(format!("invalid model name `{name}`")));
        }
        let m = Arc::new(read_model_file(self.models_dir.join(name))?);
        lock(&self.model_cache).insert(name.to_string(), m.clone());
        Ok(m)
    }

    pub fn auto_group(&self, id: &str) -> Result<AutoGroupResponse> {
        let slot = self.session(id)?;
        let mut s = lock(&slot);
        let model = self.model_for(&s)?;
        let assignments = s.run_auto_group(&model, &Control::new(self.exec))?;
        Ok(AutoGroupResponse {
            schema_version: SCHEMA_VERSION,
            assignments,
            state: SessionView::of(&s),
        })
    }

    pub fn auto_position(&self, id: &str) -> Result<AutoPositionResponse> {
        let slot = self.session(id)?;
        let mut s = lock(&slot);
        let moved = s
            .run_auto_position()?
            .into_iter()
            .map(|(image_id, position)| MovedItem { image_id, position })
            .collect();
        Ok(AutoPositionResponse {
            schema_version: SCHEMA_VERSION,
            moved,
            state: SessionView::of(&s),
        })
    }

    pub fn grid(&self, id: &str) -> Result<GridResponse> {
        let slot = self.session(id)?;
        let s = lock(&slot);
        Ok(GridResponse {
            schema_version: SCHEMA_VERSION,
            entries: s.grid_view(),
        })
    }

    fn image_source(&self, session: &str, image: &str) -> Result<Option<PathBuf>> {
        let path = self.store.session_dir(session).join(SOURCES);
        let Ok(bytes) = std::fs::read(&path) else {
            return Ok(None);
        };
        let map: BTreeMap<String, PathBuf> = serde_json::from_slice(&bytes).map_err(pilesort_core::Error::from)?;
        Ok(map.get(image).cloned())
    }

    pub fn heatmap(&self, id: &str, image: &str, q: &HeatmapQuery) -> Result<HeatmapResponse> {
        let slot = self.session(id)?;
        let (model, members, extractor) = {
            let s = lock(&slot);
            if s.image(image).is_none() {
                return Err(ServiceError::not_found("image", image));
            }
            let group = s
                .state()
                .group(&q.group)
                .ok_or_else(|| ServiceError::not_found("group", &q.group))?;
            if group.members.is_empty() {
                return Err(ServiceError::Conflict(format!("group `{}` has no members", q.group)));
            }
            let members: Vec<Vec<f64>> = group
                .members
                .iter()
                .map(|m| s.image(m).expect("member").features.0.clone())
                .collect();
            if !s.initial().extracted {
                return Err(ServiceError::Conflict(
                    "heatmaps need pixels; this session was built from precomputed features".into(),
                ));
            }
            (self.model_for(&s)?, members, s.config().extractor)
        };
        let path = self
            .image_source(id, image)?
            .ok_or_else(|| ServiceError::Conflict(format!("no stored pixels for image `{image}`")))?;
        let record = load_image(&path, image)?;
        let heatmap = occlusion_heatmap(model.as_ref(), &record, &members, q.patch, q.stride, extractor, self.exec)?;
        Ok(HeatmapResponse {
            schema_version: SCHEMA_VERSION,
            image_id: image.to_string(),
            group_id: q.group.clone(),
            heatmap,
        })
    }

    /// Fine-tunes the session's current model on its user-confirmed groups
    /// and switches the session to the result. A cancelled or failed job
    /// leaves the session's model untouched.
    pub fn finetune_job(self: &Arc<Self>, id: &str) -> Result<String> {
        let slot = self.session(id)?;
        let (data, base, seed) = {
            let s = lock(&slot);
            (s.finetune_dataset()?, self.model_for(&s)?, s.config().seed)
        };
        let app = self.clone();
        let sid = id.to_string();
        self.jobs.submit(JobKind::Finetune, Some(sid.clone()), move |job| {
            let ctl = job.control(app.exec);
            let out = train_with(&base, &data, &TrainConfig::finetune(seed), &ctl)?;
            ctl.check()?;
            let loss = out.tail_mean_loss(20).unwrap_or(f64::NAN);
            let name = format!("{sid}-{}.psrel", job.id);
            write_model_file(&out.model, app.models_dir.join(&name))?;
            lock(&app.model_cache).insert(name.clone(), Arc::new(out.model));
            let mut s = lock(&slot);
            s.set_model_ref(Some(name.clone()))?;
            app.store.write_model_ref(&sid, Some(&name))?;
            Ok(format!("fine-tuned model {name}, final loss {loss:.4}"))
        })
    }

    /// Offline pretraining on a folder-per-class dataset on the server.
    pub fn train_job(self: &Arc<Self>, req: TrainRequest) -> Result<String> {
        let extractor = parse_extractor(req.extractor.as_deref(), self.config.extractor)?;
        let out_name = req.out.clone().unwrap_or_else(|| "pretrained.psrel".into());
        if !valid_id(&out_name) {
            return Err(ServiceError::BadRequest(format!("invalid model name `{out_name}`")));
        }
        let defaults = TrainConfig::default();
        let cfg = TrainConfig {
            steps: req.steps.unwrap_or(defaults.steps),
            batch_size: req.batch_size.unwrap_or(defaults.batch_size),
            learning_rate: req.learning_rate.unwrap_or(defaults.learning_rate),
            seed: req.seed.unwrap_or(self.config.seed),
            ..defaults
        };
        cfg.validate()?;
        let dataset = PathBuf::from(&req.dataset);
        if !dataset.is_dir() {
            return Err(ServiceError::BadRequest(format!("{} is not a directory", dataset.display())));
        }
        let hidden = req.hidden.unwrap_or(DEFAULT_HIDDEN);
        let activate = req.activate.unwrap_or(true);
        let app = self.clone();
        self.jobs.submit(JobKind::Train, None, move |job| {
            let ctl = job.control(app.exec);
            let (model, report) = pretrain(&dataset, extractor, hidden, &cfg, &ctl).map_err(to_core)?;
            ctl.check()?;
            write_model_file(&model, app.models_dir.join(&out_name))?;
            let model = Arc::new(model);
            lock(&app.model_cache).insert(out_name.clone(), model.clone());
            if activate {
                app.set_default_model(Some(model));
            }
            Ok(format!("trained {out_name} on {} classes ({} skipped files)", report.0, report.1))
        })
    }
}

fn to_core(e: ServiceError) -> pilesort_core::Error {
    match e {
        ServiceError::Core(c) => c,
        other => pilesort_core::Error::InvalidInput(other.to_string()),
    }
}

/// Ingests `dataset` and trains a fresh relation model on it. Returns the
/// model plus (class count, skipped file count).
pub fn pretrain(
    dataset: &Path,
    extractor: ExtractorSpec,
    hidden: usize,
    cfg: &TrainConfig,
    ctl: &Control,
) -> Result<(RelationModel, (usize, usize))> {
    let report = ingest_dataset(dataset, extractor, ctl.exec)?;
    let init = RelationModel::init(extractor.dim(), hidden, cfg.seed).with_extractor(extractor);
    let out = train_with(&init, &report.data, cfg, ctl)?;
    Ok((out.model, (report.data.classes.len(), report.skipped.len())))
}

/// Applies one edit through the session's public operations.
pub fn apply_command(s: &mut Session, cmd: Command) -> Result<Outcome> {
    let mut out = Outcome::default();
    match cmd {
        Command::Move { image_id, x, y } => {
            out.suggestions = Some(s.move_image(&image_id, pilesort_core::Point::new(x, y))?);
        }
        Command::CreateGroup { label } => out.group_id = Some(s.create_group(&label)?),
        Command::RenameGroup { group_id, label } => s.rename_group(&group_id, &label)?,
        Command::DeleteGroup { group_id } => s.delete_group(&group_id)?,
        Command::Assign { image_id, group_id } => s.assign_to_group(&image_id, &group_id, Actor::User)?,
        Command::Unassign { image_id } => s.unassign(&image_id)?,
        Command::SetThreshold { threshold } => s.set_threshold(threshold)?,
        Command::Undo => out.undone_batch = s.undo()?,
    }
    Ok(out)
}
