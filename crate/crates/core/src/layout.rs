//! Auto-positioning and proximity feedback.
//!
//! A ridge regression from PCA coordinates to canvas positions is fitted on
//! the images the user has placed and used to predict positions for the
//! rest. Predictions that land on top of each other are pushed apart along
//! a per-image spiral.

use serde::{Deserialize, Serialize};

use crate::canvas::{CanvasBounds, Point};
use crate::error::{Error, Result};
use crate::linalg::{dot, symmetric_eigen, Matrix};

pub const DEFAULT_RIDGE: f64 = 1e-2;
pub const DEFAULT_MIN_SEP: f64 = 8.0;
/// Proximity radius is this multiple of the group's bounding-circle radius.
pub const PROXIMITY_FACTOR: f64 = 1.5;
/// Floor on the bounding-circle radius so single-member groups have a footprint.
pub const MIN_GROUP_RADIUS: f64 = DEFAULT_MIN_SEP;

const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653;
const MAX_SPIRAL_STEPS: usize = 20_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionRegressor {
    /// Centre of the exemplar features.
    pub feature_mean: Vec<f64>,
    /// `k' × 2`.
    pub weights: Matrix,
    pub intercept: [f64; 2],
    pub lambda: f64,
}

/// Ridge least squares on centred features, one output per canvas axis.
/// Zero `lambda` gives the minimum-norm least-squares solution.
pub fn fit_position_regressor(exemplars: &[(&[f64], Point)], lambda: f64) -> Result<PositionRegressor> {
    if exemplars.is_empty() {
        return Err(Error::Precondition("arrange a few images first".into()));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid("ridge lambda must be finite and non-negative"));
    }
    let k = exemplars[0].0.len();
    if let Some((f, _)) = exemplars.iter().find(|(f, _)| f.len() != k) {
        return Err(Error::DimensionMismatch {
            expected: k,
            found: f.len(),
        });
    }
    let n = exemplars.len() as f64;
    let mut feature_mean = vec![0.0; k];
    let mut intercept = [0.0; 2];
    for (f, p) in exemplars {
        feature_mean.iter_mut().zip(f.iter()).for_each(|(m, v)| *m += v);
        intercept[0] += p.x;
        intercept[1] += p.y;
    }
    feature_mean.iter_mut().for_each(|m| *m /= n);
    intercept.iter_mut().for_each(|c| *c /= n);

    let mut gram = Matrix::zeros(k, k);
    let mut xty = Matrix::zeros(k, 2);
    for (f, p) in exemplars {
        let xc: Vec<f64> = f.iter().zip(&feature_mean).map(|(a, m)| a - m).collect();
        let yc = [p.x - intercept[0], p.y - intercept[1]];
        for a in 0..k {
            for b in 0..k {
                gram[(a, b)] += xc[a] * xc[b];
            }
            xty[(a, 0)] += xc[a] * yc[0];
            xty[(a, 1)] += xc[a] * yc[1];
        }
    }

    // W = V diag(1 / (s + λ)) Vᵀ XᵀY, dropping null directions
    let (vals, vecs) = symmetric_eigen(&gram)?;
    let top = vals.first().copied().unwrap_or(0.0).max(0.0);
    let cutoff = top * 1e-12 * k as f64;
    let mut weights = Matrix::zeros(k, 2);
    for (i, &s) in vals.iter().enumerate() {
        let denom = s.max(0.0) + lambda;
        if s <= cutoff && lambda == 0.0 || denom <= 0.0 {
            continue;
        }
        let v = vecs.row(i);
        for c in 0..2 {
            let proj: f64 = (0..k).map(|a| v[a] * xty[(a, c)]).sum::<f64>() / denom;
            for a in 0..k {
                weights[(a, c)] += v[a] * proj;
            }
        }
    }
    Ok(PositionRegressor {
        feature_mean,
        weights,
        intercept,
        lambda,
    })
}

impl PositionRegressor {
    pub fn input_dim(&self) -> usize {
        self.feature_mean.len()
    }

    /// Unclamped linear prediction.
    pub fn predict_raw(&self, f: &[f64]) -> Result<Point> {
        if f.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: f.len(),
            });
        }
        let xc: Vec<f64> = f.iter().zip(&self.feature_mean).map(|(a, m)| a - m).collect();
        let col = |c: usize| -> Vec<f64> { (0..self.input_dim()).map(|a| self.weights[(a, c)]).collect() };
        Ok(Point::new(
            self.intercept[0] + dot(&xc, &col(0)),
            self.intercept[1] + dot(&xc, &col(1)),
        ))
    }
}

/// Stable 64-bit FNV-1a; seeds the per-image spiral direction.
pub fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Predicts, clamps into the canvas and separates predictions closer than
/// `min_sep`. Items are placed in input order; each later item that collides
/// walks its own golden-angle spiral until it is clear of earlier ones.
pub fn predict_positions(
    reg: &PositionRegressor,
    items: &[(&str, &[f64])],
    canvas: CanvasBounds,
    min_sep: f64,
) -> Result<Vec<Point>> {
    let raw = items
        .iter()
        .map(|(_, f)| reg.predict_raw(f).map(|p| canvas.clamp(p)))
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<&str> = items.iter().map(|(id, _)| *id).collect();
    Ok(separate(&raw, &ids, canvas, min_sep))
}

fn min_dist_to(placed: &[Point], p: Point) -> f64 {
    placed.iter().map(|q| q.dist(p)).fold(f64::INFINITY, f64::min)
}

pub(crate) fn separate(raw: &[Point], ids: &[&str], canvas: CanvasBounds, min_sep: f64) -> Vec<Point> {
    let mut placed: Vec<Point> = Vec::with_capacity(raw.len());
    for (p, id) in raw.iter().zip(ids) {
        if min_dist_to(&placed, *p) >= min_sep {
            placed.push(*p);
            continue;
        }
        let theta0 = (stable_hash(id) % 3600) as f64 / 3600.0 * std::f64::consts::TAU;
        let mut best = (*p, min_dist_to(&placed, *p));
        for s in 1..=MAX_SPIRAL_STEPS {
            let r = min_sep * (s as f64).sqrt();
            let th = theta0 + s as f64 * GOLDEN_ANGLE;
            let cand = canvas.clamp(Point::new(p.x + r * th.cos(), p.y + r * th.sin()));
            let d = min_dist_to(&placed, cand);
            if d >= min_sep {
                best = (cand, d);
                break;
            }
            if d > best.1 {
                best = (cand, d);
            }
        }
        placed.push(best.0);
    }
    placed
}

/// Canvas footprint of a group: member centroid and bounding-circle radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupFootprint {
    pub group_id: String,
    pub centroid: Point,
    pub radius: f64,
}

impl GroupFootprint {
    pub fn from_members(group_id: impl Into<String>, members: &[Point]) -> Option<Self> {
        if members.is_empty() {
            return None;
        }
        let n = members.len() as f64;
        let centroid = Point::new(
            members.iter().map(|p| p.x).sum::<f64>() / n,
            members.iter().map(|p| p.y).sum::<f64>() / n,
        );
        let radius = members.iter().map(|p| p.dist(centroid)).fold(0.0, f64::max);
        Some(Self {
            group_id: group_id.into(),
            centroid,
            radius,
        })
    }

    pub fn reach(&self) -> f64 {
        PROXIMITY_FACTOR * self.radius.max(MIN_GROUP_RADIUS)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub image_id: String,
    pub group_id: String,
    pub distance: f64,
}

/// For each ungrouped image within reach of some group, the nearest such
/// group (earlier footprint wins ties). Sorted by distance, then input order.
pub fn proximity_suggestions(footprints: &[GroupFootprint], ungrouped: &[(&str, Point)]) -> Vec<Suggestion> {
    let mut out: Vec<(usize, Suggestion)> = Vec::new();
    for (idx, (id, pos)) in ungrouped.iter().enumerate() {
        let mut best: Option<(&GroupFootprint, f64)> = None;
        for g in footprints {
            let d = pos.dist(g.centroid);
            if d <= g.reach() && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((g, d));
            }
        }
        if let Some((g, d)) = best {
            out.push((
                idx,
                Suggestion {
                    image_id: id.to_string(),
                    group_id: g.group_id.clone(),
                    distance: d,
                },
            ));
        }
    }
    out.sort_by(|a, b| a.1.distance.total_cmp(&b.1.distance).then(a.0.cmp(&b.0)));
    out.into_iter().map(|(_, s)| s).collect()
}
