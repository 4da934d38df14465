use serde::{Deserialize, Serialize};

use super::model::RelationScorer;
use crate::error::{Error, Result};
use crate::par::Exec;

pub const DEFAULT_THRESHOLD: f64 = 0.6;

/// Mean pair score of `f` against every member.
pub fn group_probability<S, M>(scorer: &S, f: &[f64], members: &[M]) -> Result<f64>
where
    S: RelationScorer + ?Sized,
    M: AsRef<[f64]>,
{
    if members.is_empty() {
        return Err(Error::invalid("group has no members"));
    }
    let mut sum = 0.0;
    for m in members {
        sum += scorer.score(f, m.as_ref())?;
    }
    Ok(sum / members.len() as f64)
}

/// A user group as seen by the auto-grouper. Slices must be in creation order.
#[derive(Debug, Clone)]
pub struct GroupSupport<'a> {
    pub group_id: String,
    pub members: Vec<&'a [f64]>,
}

#[derive(Debug, Clone)]
pub struct Candidate<'a> {
    pub image_id: String,
    pub features: &'a [f64],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub group_id: String,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub image_id: String,
    pub chosen_group: Option<String>,
    /// One entry per group, in group creation order.
    pub probabilities: Vec<GroupScore>,
}

impl Assignment {
    pub fn probability_of(&self, group_id: &str) -> Option<f64> {
        self.probabilities
            .iter()
            .find(|g| g.group_id == group_id)
            .map(|g| g.probability)
    }
}

/// Argmax over `scores` (earliest wins ties), kept only if it reaches `threshold`.
pub fn choose_group(scores: &[GroupScore], threshold: f64) -> Option<&str> {
    let mut best: Option<&GroupScore> = None;
    for s in scores {
        if best.is_none_or(|b| s.probability > b.probability) {
            best = Some(s);
        }
    }
    best.filter(|b| b.probability >= threshold).map(|b| b.group_id.as_str())
}

/// Scores every candidate against every group and applies the
/// argmax-with-abstention rule. Output order follows `candidates`.
pub fn auto_group<S: RelationScorer + ?Sized>(
    scorer: &S,
    candidates: &[Candidate<'_>],
    groups: &[GroupSupport<'_>],
    threshold: f64,
    exec: Exec,
) -> Result<Vec<Assignment>> {
    if groups.is_empty() || groups.iter().all(|g| g.members.is_empty()) {
        return Err(Error::Precondition("nothing to learn from yet: create a group first".into()));
    }
    if let Some(g) = groups.iter().find(|g| g.members.is_empty()) {
        return Err(Error::invalid(format!("group `{}` has no members", g.group_id)));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid("threshold must lie strictly between 0 and 1"));
    }
    exec.map_slice(candidates, |c| -> Result<Assignment> {
        let probabilities = groups
            .iter()
            .map(|g| {
                Ok(GroupScore {
                    group_id: g.group_id.clone(),
                    probability: group_probability(scorer, c.features, &g.members)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let chosen_group = choose_group(&probabilities, threshold).map(str::to_string);
        Ok(Assignment {
            image_id: c.image_id.clone(),
            chosen_group,
            probabilities,
        })
    })
    .into_iter()
    .collect()
}
