use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{Actor, Event, ImageEntry, InitialSnapshot, Provenance, Session};
use crate::canvas::{CanvasBounds, Point};
use crate::embedding::{pca_fit_with, scale_to_canvas, tsne_embed_with, TsneParams, DEFAULT_PCA_DIMS};
use crate::error::{Error, Result};
use crate::features::{extract_batch, standardize_collection, ExtractorSpec, FeatureVector, ImageRecord};
use crate::fewshot::{auto_group, Assignment, Candidate, GroupSupport, LabeledFeatures, RelationModel, DEFAULT_THRESHOLD};
use crate::layout::{
    fit_position_regressor, predict_positions, proximity_suggestions, GroupFootprint, Suggestion, DEFAULT_MIN_SEP,
    DEFAULT_RIDGE,
};
use crate::linalg::Matrix;
use crate::par::Control;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub canvas: CanvasBounds,
    pub margin: f64,
    pub threshold: f64,
    pub seed: u64,
    pub extractor: ExtractorSpec,
    pub pca_dims: usize,
    pub tsne: TsneParams,
    pub min_sep: f64,
    pub ridge_lambda: f64,
    pub model_ref: Option<String>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            canvas: CanvasBounds::default(),
            margin: 40.0,
            threshold: DEFAULT_THRESHOLD,
            seed: 0,
            extractor: ExtractorSpec::default(),
            pca_dims: DEFAULT_PCA_DIMS,
            tsne: TsneParams::default(),
            min_sep: DEFAULT_MIN_SEP,
            ridge_lambda: DEFAULT_RIDGE,
            model_ref: None,
        }
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid("threshold must lie strictly between 0 and 1"))
    }
}

/// Extracts features and pre-clusters the images onto the canvas.
pub fn create_session(
    session_id: impl Into<String>,
    images: &[ImageRecord],
    config: SessionConfig,
    ctl: &Control,
) -> Result<Session> {
    let features = extract_batch(images, config.extractor, ctl.exec)?;
    let rows = images.iter().map(|i| i.id.clone()).zip(features).collect();
    build(session_id.into(), rows, config, true, ctl)
}

/// Same pipeline, starting from precomputed features.
pub fn create_session_from_features(
    session_id: impl Into<String>,
    features: Vec<(String, FeatureVector)>,
    config: SessionConfig,
    ctl: &Control,
) -> Result<Session> {
    build(session_id.into(), features, config, false, ctl)
}

fn build(
    session_id: String,
    rows: Vec<(String, FeatureVector)>,
    config: SessionConfig,
    extracted: bool,
    ctl: &Control,
) -> Result<Session> {
    check_threshold(config.threshold)?;
    let mut seen = HashSet::new();
    if let Some((id, _)) = rows.iter().find(|(id, _)| !seen.insert(id.as_str())) {
        return Err(Error::invalid(format!("duplicate image id `{id}`")));
    }
    let d = rows.first().map_or(0, |(_, f)| f.len());
    if let Some((id, f)) = rows.iter().find(|(_, f)| f.len() != d) {
        return Err(Error::invalid(format!("image `{id}` has {} features, expected {d}", f.len())));
    }
    let canvas = config.canvas;
    if rows.len() < 2 {
        // nothing to embed: at most one item, placed at the centre
        ctl.report(1.0);
        let positions = vec![canvas.center(); rows.len()];
        let images = rows
            .into_iter()
            .map(|(id, features)| ImageEntry {
                id,
                features,
                reduced: Vec::new(),
                embedding: Point::default(),
            })
            .collect();
        let snap = InitialSnapshot {
            schema_version: SCHEMA_VERSION,
            session_id,
            config,
            images,
            positions,
            standardization: None,
            pca: None,
            kl_trace: Vec::new(),
            extracted,
        };
        return Session::from_snapshot(snap);
    }

    let feats: Vec<FeatureVector> = rows.iter().map(|(_, f)| f.clone()).collect();
    let (z, stats) = standardize_collection(&feats)?;
    let pca = pca_fit_with(&Matrix::from_rows(&z)?, config.pca_dims, ctl.exec)?;
    let reduced_rows = z.iter().map(|r| pca.transform(r)).collect::<Result<Vec<_>>>()?;
    let reduced = Matrix::from_rows(&reduced_rows)?;
    ctl.check()?;
    let params = config.tsne.with_seed(config.seed);
    let tsne = tsne_embed_with(&params, &reduced, ctl)?;
    let positions = scale_to_canvas(&tsne.coords, canvas, config.margin)?;
    let images = rows
        .into_iter()
        .zip(reduced_rows)
        .enumerate()
        .map(|(i, ((id, features), reduced))| ImageEntry {
            id,
            features,
            reduced,
            embedding: Point::new(tsne.coords[(i, 0)], tsne.coords[(i, 1)]),
        })
        .collect();
    let snap = InitialSnapshot {
        schema_version: SCHEMA_VERSION,
        session_id,
        config,
        images,
        positions,
        standardization: Some(stats),
        pca: Some(pca),
        kl_trace: tsne.kl_trace,
        extracted,
    };
    Session::from_snapshot(snap)
}

/// One row of the grid view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub image_id: String,
    pub group_id: Option<String>,
    /// Sort key inside a group: 1.0 for user-confirmed members.
    pub probability: Option<f64>,
    pub auto: bool,
}

impl Session {
    pub fn move_image(&mut self, image_id: &str, to: Point) -> Result<Vec<Suggestion>> {
        if self.item(image_id).is_none() {
            return Err(Error::not_found("image", image_id));
        }
        if !to.is_finite() {
            return Err(Error::invalid("position must be finite"));
        }
        let to = self.canvas().clamp(to);
        self.commit(
            vec![Event::Moved {
                image_id: image_id.to_string(),
                to,
                by: Actor::User,
            }],
            true,
        )?;
        Ok(self.suggestions())
    }

    /// Returns the new group's id.
    pub fn create_group(&mut self, label: &str) -> Result<String> {
        let idx = self.state.next_group_index;
        let group_id = format!("g{idx}");
        self.commit(
            vec![Event::GroupCreated {
                group_id: group_id.clone(),
                label: label.to_string(),
                creation_index: idx,
            }],
            true,
        )?;
        Ok(group_id)
    }

    pub fn rename_group(&mut self, group_id: &str, label: &str) -> Result<()> {
        self.commit(
            vec![Event::GroupRenamed {
                group_id: group_id.to_string(),
                label: label.to_string(),
            }],
            true,
        )?;
        Ok(())
    }

    pub fn delete_group(&mut self, group_id: &str) -> Result<()> {
        self.commit(
            vec![Event::GroupDeleted {
                group_id: group_id.to_string(),
            }],
            true,
        )?;
        Ok(())
    }

    pub fn assign_to_group(&mut self, image_id: &str, group_id: &str, by: Actor) -> Result<()> {
        self.commit(
            vec![Event::Assigned {
                image_id: image_id.to_string(),
                group_id: group_id.to_string(),
                by,
                probability: None,
            }],
            true,
        )?;
        Ok(())
    }

    pub fn unassign(&mut self, image_id: &str) -> Result<()> {
        if self.item(image_id).is_none() {
            return Err(Error::not_found("image", image_id));
        }
        if self.item(image_id).is_some_and(|i| i.group_id.is_none()) {
            return Ok(());
        }
        self.commit(
            vec![Event::Unassigned {
                image_id: image_id.to_string(),
            }],
            true,
        )?;
        Ok(())
    }

    pub fn set_threshold(&mut self, threshold: f64) -> Result<()> {
        check_threshold(threshold)?;
        self.commit(vec![Event::ThresholdChanged { threshold }], true)?;
        Ok(())
    }

    /// Records a model swap. Not undoable.
    pub fn set_model_ref(&mut self, model_ref: Option<String>) -> Result<()> {
        self.commit(vec![Event::ModelChanged { model_ref }], false)?;
        Ok(())
    }

    fn check_model(&self, model: &RelationModel) -> Result<()> {
        let Some(first) = self.initial.images.first() else {
            return Ok(());
        };
        let d = first.features.len();
        if model.feature_dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: model.feature_dim(),
            });
        }
        if self.initial.extracted {
            if let Some(e) = model.extractor {
                if e != self.config().extractor {
                    return Err(Error::invalid(format!(
                        "model expects `{e}` features but the session uses `{}`",
                        self.config().extractor
                    )));
                }
            }
        }
        Ok(())
    }

    /// Scores every ungrouped image against every non-empty group and
    /// applies the confident assignments as one undoable batch.
    pub fn run_auto_group(&mut self, model: &RelationModel, ctl: &Control) -> Result<Vec<Assignment>> {
        self.check_model(model)?;
        let groups: Vec<GroupSupport<'_>> = self
            .state
            .groups
            .iter()
            .filter(|g| !g.members.is_empty())
            .map(|g| GroupSupport {
                group_id: g.id.clone(),
                members: g
                    .members
                    .iter()
                    .map(|m| self.image(m).expect("member exists").features.as_slice())
                    .collect(),
            })
            .collect();
        if groups.is_empty() {
            return Err(Error::Precondition("create a group first".into()));
        }
        let candidates: Vec<Candidate<'_>> = self
            .state
            .items
            .iter()
            .filter(|i| i.group_id.is_none())
            .map(|i| Candidate {
                image_id: i.image_id.clone(),
                features: self.image(&i.image_id).expect("item exists").features.as_slice(),
            })
            .collect();
        let assignments = auto_group(model, &candidates, &groups, self.state.threshold, ctl.exec)?;
        let mut events = Vec::new();
        for a in &assignments {
            events.push(Event::ConfidenceRecorded {
                image_id: a.image_id.clone(),
                scores: a.probabilities.clone(),
            });
            if let Some(g) = &a.chosen_group {
                events.push(Event::Assigned {
                    image_id: a.image_id.clone(),
                    group_id: g.clone(),
                    by: Actor::Auto,
                    probability: a.probability_of(g),
                });
            }
        }
        self.commit(events, true)?;
        Ok(assignments)
    }

    /// Images the user has placed or grouped.
    pub fn exemplars(&self) -> Vec<&str> {
        self.state
            .items
            .iter()
            .filter(|i| {
                i.provenance == Provenance::User
                    || i.group_id.as_ref().is_some_and(|g| {
                        self.state.group(g).is_some_and(|g| !g.is_auto_member(&i.image_id))
                    })
            })
            .map(|i| i.image_id.as_str())
            .collect()
    }

    /// Fits the position regressor on exemplars and moves every unpinned,
    /// ungrouped image. Returns the moved `(id, position)` pairs.
    pub fn run_auto_position(&mut self) -> Result<Vec<(String, Point)>> {
        let exemplar_ids = self.exemplars();
        if exemplar_ids.is_empty() {
            return Err(Error::Precondition("arrange a few images first".into()));
        }
        let training: Vec<(&[f64], Point)> = exemplar_ids
            .iter()
            .map(|id| {
                (
                    self.image(id).expect("exists").reduced.as_slice(),
                    self.item(id).expect("exists").position,
                )
            })
            .collect();
        let reg = fit_position_regressor(&training, self.config().ridge_lambda)?;
        let targets: Vec<(&str, &[f64])> = self
            .state
            .items
            .iter()
            .filter(|i| !i.pinned && i.group_id.is_none())
            .map(|i| (i.image_id.as_str(), self.image(&i.image_id).expect("exists").reduced.as_slice()))
            .collect();
        let predicted = predict_positions(&reg, &targets, self.canvas(), self.config().min_sep)?;
        let moved: Vec<(String, Point)> = targets
            .iter()
            .zip(predicted)
            .map(|((id, _), p)| (id.to_string(), p))
            .collect();
        let events = moved
            .iter()
            .map(|(id, p)| Event::Moved {
                image_id: id.clone(),
                to: *p,
                by: Actor::Auto,
            })
            .collect();
        self.commit(events, true)?;
        Ok(moved)
    }

    pub fn footprints(&self) -> Vec<GroupFootprint> {
        self.state
            .groups
            .iter()
            .filter_map(|g| {
                let pts: Vec<Point> = g.members.iter().map(|m| self.item(m).expect("member").position).collect();
                GroupFootprint::from_members(g.id.clone(), &pts)
            })
            .collect()
    }

    pub fn suggestions(&self) -> Vec<Suggestion> {
        let ungrouped: Vec<(&str, Point)> = self
            .state
            .items
            .iter()
            .filter(|i| i.group_id.is_none())
            .map(|i| (i.image_id.as_str(), i.position))
            .collect();
        proximity_suggestions(&self.footprints(), &ungrouped)
    }

    /// Groups by creation order (members by probability, user-confirmed
    /// first), then ungrouped images by embedding x, then y.
    pub fn grid_view(&self) -> Vec<GridEntry> {
        let mut out = Vec::with_capacity(self.state.items.len());
        let mut groups: Vec<_> = self.state.groups.iter().collect();
        groups.sort_by_key(|g| g.creation_index);
        for g in groups {
            let mut members: Vec<(usize, GridEntry)> = g
                .members
                .iter()
                .enumerate()
                .map(|(pos, m)| {
                    let auto = g.is_auto_member(m);
                    let probability = if auto { g.auto_probability.get(m).copied() } else { Some(1.0) };
                    (
                        pos,
                        GridEntry {
                            image_id: m.clone(),
                            group_id: Some(g.id.clone()),
                            probability,
                            auto,
                        },
                    )
                })
                .collect();
            members.sort_by(|(pa, a), (pb, b)| {
                (a.auto as u8)
                    .cmp(&(b.auto as u8))
                    .then(b.probability.unwrap_or(0.0).total_cmp(&a.probability.unwrap_or(0.0)))
                    .then(pa.cmp(pb))
            });
            out.extend(members.into_iter().map(|(_, e)| e));
        }
        let mut ungrouped: Vec<(usize, &ImageEntry)> = self
            .state
            .items
            .iter()
            .enumerate()
            .filter(|(_, i)| i.group_id.is_none())
            .map(|(k, _)| (k, &self.initial.images[k]))
            .collect();
        ungrouped.sort_by(|(ka, a), (kb, b)| {
            a.embedding
                .x
                .total_cmp(&b.embedding.x)
                .then(a.embedding.y.total_cmp(&b.embedding.y))
                .then(ka.cmp(kb))
        });
        out.extend(ungrouped.into_iter().map(|(_, img)| GridEntry {
            image_id: img.id.clone(),
            group_id: None,
            probability: None,
            auto: false,
        }));
        out
    }

    /// User-confirmed group members as a labelled set for fine-tuning.
    pub fn finetune_dataset(&self) -> Result<LabeledFeatures> {
        let classes: Vec<(String, Vec<FeatureVector>)> = self
            .state
            .groups
            .iter()
            .map(|g| {
                let confirmed = g
                    .members
                    .iter()
                    .filter(|m| !g.is_auto_member(m))
                    .map(|m| self.image(m).expect("member").features.clone())
                    .collect::<Vec<_>>();
                (g.id.clone(), confirmed)
            })
            .filter(|(_, v)| v.len() >= 2)
            .collect();
        if classes.len() < 2 {
            return Err(Error::Precondition(
                "fine-tuning needs two groups with at least two confirmed images each".into(),
            ));
        }
        Ok(LabeledFeatures { classes })
    }
}
