//! Few-shot grouping: a binary relation network scores image pairs, group
//! membership is the mean pair score against the group's members, and
//! auto-grouping takes the argmax over groups subject to an abstention
//! threshold.

mod episodes;
mod group;
mod model;
mod saliency;
mod snapshot;
mod train;

pub use episodes::{evaluate_episodes, sample_episode, EpisodeEval, EpisodePair, EvalReport, LabeledFeatures};
pub use group::{
    auto_group, choose_group, group_probability, Assignment, Candidate, GroupScore, GroupSupport,
    DEFAULT_THRESHOLD,
};
pub use model::{pair_features, LabeledPair, ModelGradient, RelationModel, RelationScorer, DEFAULT_HIDDEN};
pub use saliency::{occlusion_heatmap, Heatmap, OCCLUSION_FILL};
pub use snapshot::{read_model, read_model_file, write_model, write_model_file, SNAPSHOT_VERSION};
pub use train::{train, train_with, Adam, TrainConfig, TrainOutcome};
