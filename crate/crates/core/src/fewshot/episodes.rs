use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::group::group_probability;
use super::model::{LabeledPair, RelationScorer};
use crate::error::{Error, Result};
use crate::features::FeatureVector;
use crate::par::Exec;

/// Class name → feature vectors, in lexicographic class order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledFeatures {
    pub classes: Vec<(String, Vec<FeatureVector>)>,
}

impl LabeledFeatures {
    pub fn from_map(map: BTreeMap<String, Vec<FeatureVector>>) -> Self {
        Self {
            classes: map.into_iter().collect(),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn n_examples(&self) -> usize {
        self.classes.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn dim(&self) -> Option<usize> {
        self.classes.iter().flat_map(|(_, v)| v.first()).map(FeatureVector::len).next()
    }

    pub fn get(&self, (class, idx): (usize, usize)) -> &[f64] {
        self.classes[class].1[idx].as_slice()
    }

    /// Checks the episodic sampling preconditions.
    pub fn validate_for_episodes(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::invalid("episodic sampling needs at least two classes"));
        }
        if let Some((name, _)) = self.classes.iter().find(|(_, v)| v.len() < 2) {
            return Err(Error::invalid(format!("class `{name}` has fewer than two examples")));
        }
        let d = self.dim().unwrap_or(0);
        if self.classes.iter().flat_map(|(_, v)| v).any(|f| f.len() != d) {
            return Err(Error::invalid("feature vectors have inconsistent lengths"));
        }
        Ok(())
    }

    pub fn resolve<'a>(&'a self, pairs: &[EpisodePair]) -> Vec<LabeledPair<'a>> {
        pairs
            .iter()
            .map(|p| LabeledPair {
                a: self.get(p.a),
                b: self.get(p.b),
                same: p.same,
            })
            .collect()
    }
}

/// A sampled pair, as `(class, index)` references into a [`LabeledFeatures`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodePair {
    pub a: (usize, usize),
    pub b: (usize, usize),
    pub same: bool,
}

/// `batch_size / 2` same-class pairs followed by as many cross-class pairs.
/// Classes are drawn uniformly; a pair never uses one example twice.
pub fn sample_episode<R: Rng + ?Sized>(
    data: &LabeledFeatures,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<EpisodePair>> {
    data.validate_for_episodes()?;
    if batch_size == 0 || !batch_size.is_multiple_of(2) {
        return Err(Error::invalid("batch size must be a positive even number"));
    }
    let n_classes = data.n_classes();
    let half = batch_size / 2;
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..half {
        let c = rng.random_range(0..n_classes);
        let picks = sample(rng, data.classes[c].1.len(), 2);
        out.push(EpisodePair {
            a: (c, picks.index(0)),
            b: (c, picks.index(1)),
            same: true,
        });
    }
    for _ in 0..half {
        let cs = sample(rng, n_classes, 2);
        let (ca, cb) = (cs.index(0), cs.index(1));
        let ia = rng.random_range(0..data.classes[ca].1.len());
        let ib = rng.random_range(0..data.classes[cb].1.len());
        out.push(EpisodePair {
            a: (ca, ia),
            b: (cb, ib),
            same: false,
        });
    }
    Ok(out)
}

/// N-way K-shot evaluation protocol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEval {
    pub n_way: usize,
    pub k_shot: usize,
    pub queries_per_class: usize,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for EpisodeEval {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 1,
            queries_per_class: 1,
            episodes: 500,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

struct SampledEpisode {
    /// Per way: (class, support indices).
    support: Vec<(usize, Vec<usize>)>,
    /// (true way, class, index).
    queries: Vec<(usize, usize, usize)>,
}

/// Each query is classified by the argmax of its group probability against
/// every way's support set (no abstention). Episodes are sampled
/// sequentially from `seed` and scored with `exec`.
pub fn evaluate_episodes<S: RelationScorer>(
    scorer: &S,
    data: &LabeledFeatures,
    protocol: EpisodeEval,
    exec: Exec,
) -> Result<EvalReport> {
    let per_class = protocol.k_shot + protocol.queries_per_class;
    if protocol.n_way < 2 || protocol.k_shot == 0 || protocol.queries_per_class == 0 {
        return Err(Error::invalid("need n_way >= 2, k_shot >= 1 and at least one query"));
    }
    let eligible: Vec<usize> = (0..data.n_classes())
        .filter(|&c| data.classes[c].1.len() >= per_class)
        .collect();
    if eligible.len() < protocol.n_way {
        return Err(Error::invalid(format!(
            "only {} classes have {} examples; {}-way evaluation impossible",
            eligible.len(),
            per_class,
            protocol.n_way
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
    let episodes: Vec<SampledEpisode> = (0..protocol.episodes)
        .map(|_| {
            let ways = sample(&mut rng, eligible.len(), protocol.n_way);
            let mut support = Vec::with_capacity(protocol.n_way);
            let mut queries = Vec::new();
            for (w, wi) in ways.iter().enumerate() {
                let c = eligible[wi];
                let picks = sample(&mut rng, data.classes[c].1.len(), per_class).into_vec();
                support.push((c, picks[..protocol.k_shot].to_vec()));
                queries.extend(picks[protocol.k_shot..].iter().map(|&i| (w, c, i)));
            }
            SampledEpisode { support, queries }
        })
        .collect();

    let per_episode = exec.map_slice(&episodes, |ep| -> Result<(usize, usize)> {
        let mut correct = 0;
        for &(truth, c, i) in &ep.queries {
            let q = data.get((c, i));
            let mut best = (0, f64::NEG_INFINITY);
            for (w, (sc, idxs)) in ep.support.iter().enumerate() {
                let members: Vec<&[f64]> = idxs.iter().map(|&j| data.get((*sc, j))).collect();
                let p = group_probability(scorer, q, &members)?;
                if p > best.1 {
                    best = (w, p);
                }
            }
            correct += usize::from(best.0 == truth);
        }
        Ok((correct, ep.queries.len()))
    });
    let (mut correct, mut total) = (0, 0);
    for r in per_episode {
        let (c, t) = r?;
        correct += c;
        total += t;
    }
    Ok(EvalReport {
        correct,
        total,
        accuracy: correct as f64 / total.max(1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(classes: usize, per: usize) -> LabeledFeatures {
        LabeledFeatures {
            classes: (0..classes)
                .map(|c| {
                    (
                        format!("c{c}"),
                        (0..per).map(|i| FeatureVector(vec![c as f64, i as f64])).collect(),
                    )
                })
                .collect(),
        }
    }

    #[test]
    fn forced_composition() {
        let data = toy(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_episode(&data, 4, &mut rng).unwrap();
        assert_eq!(b.iter().filter(|p| p.same).count(), 2);
        assert_eq!(b.iter().filter(|p| !p.same).count(), 2);
        for p in &b {
            assert_ne!(p.a, p.b);
            assert_eq!(p.same, p.a.0 == p.b.0);
        }
    }

    #[test]
    fn label_balance_is_exact() {
        let data = toy(5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pos = 0;
        let mut total = 0;
        while total < 10_000 {
            let b = sample_episode(&data, 20, &mut rng).unwrap();
            pos += b.iter().filter(|p| p.same).count();
            total += b.len();
        }
        assert_eq!(pos * 2, total);
    }

    #[test]
    fn insufficient_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_episode(&toy(1, 5), 4, &mut rng).is_err());
        assert!(sample_episode(&toy(3, 1), 4, &mut rng).is_err());
        assert!(sample_episode(&toy(3, 3), 3, &mut rng).is_err());
    }

    #[test]
    fn evaluation_needs_enough_classes() {
        struct Half;
        impl RelationScorer for Half {
            fn score(&self, _: &[f64], _: &[f64]) -> Result<f64> {
                Ok(0.5)
            }
        }
        let p = EpisodeEval { n_way: 5, ..EpisodeEval::default() };
        assert!(evaluate_episodes(&Half, &toy(3, 5), p, Exec::Serial).is_err());
    }

    #[test]
    fn perfect_scorer_gets_full_accuracy() {
        // classes differ in the first coordinate
        struct SameClass;
        impl RelationScorer for SameClass {
            fn score(&self, a: &[f64], b: &[f64]) -> Result<f64> {
                Ok(if a[0] == b[0] { 0.9 } else { 0.1 })
            }
        }
        let p = EpisodeEval {
            n_way: 5,
            k_shot: 2,
            queries_per_class: 2,
            episodes: 50,
            seed: 9,
        };
        let r = evaluate_episodes(&SameClass, &toy(8, 6), p, Exec::Parallel).unwrap();
        assert_eq!(r.total, 50 * 5 * 2);
        assert_eq!(r.accuracy, 1.0);
    }
}
