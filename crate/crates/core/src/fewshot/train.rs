use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::episodes::{sample_episode, LabeledFeatures};
use super::model::RelationModel;
use crate::error::{Error, Result};
use crate::par::Control;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    /// Even; half same-class pairs, half cross-class.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Per-session fine-tuning on user groups.
    pub fn finetune(seed: u64) -> Self {
        Self {
            steps: 200,
            learning_rate: 1e-4,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::invalid("batch size must be a positive even number"));
        }
        if !(self.learning_rate > 0.0 && self.epsilon > 0.0) {
            return Err(Error::invalid("learning rate and epsilon must be positive"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n_params: usize, cfg: &TrainConfig) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.epsilon,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: RelationModel,
    /// Mean batch loss at every step, before that step's update.
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn tail_mean_loss(&self, window: usize) -> Option<f64> {
        let w = window.min(self.losses.len());
        (w > 0).then(|| self.losses[self.losses.len() - w..].iter().sum::<f64>() / w as f64)
    }
}

pub fn train(model: &RelationModel, data: &LabeledFeatures, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, data, cfg, &Control::default())
}

/// Episodic training on a private copy of `model`.
pub fn train_with(
    model: &RelationModel,
    data: &LabeledFeatures,
    cfg: &TrainConfig,
    ctl: &Control,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.validate_for_episodes()?;
    if data.dim() != Some(model.feature_dim()) {
        return Err(Error::DimensionMismatch {
            expected: model.feature_dim(),
            found: data.dim().unwrap_or(0),
        });
    }
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.params().len(), cfg);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        ctl.check()?;
        let episode = sample_episode(data, cfg.batch_size, &mut rng)?;
        let batch = data.resolve(&episode);
        let g = model.gradient(&batch, ctl.exec)?;
        if !g.loss.is_finite() || g.grads.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training { step, loss: g.loss });
        }
        losses.push(g.loss);
        adam.step(model.params_mut(), &g.grads);
        ctl.report((step + 1) as f64 / cfg.steps as f64);
    }
    Ok(TrainOutcome { model, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureVector;

    fn two_points() -> LabeledFeatures {
        LabeledFeatures {
            classes: vec![
                ("a".into(), vec![FeatureVector(vec![0.0, 1.0]), FeatureVector(vec![0.1, 1.0])]),
                ("b".into(), vec![FeatureVector(vec![1.0, 0.0]), FeatureVector(vec![1.0, 0.2])]),
            ],
        }
    }

    #[test]
    fn zero_steps_is_identity() {
        let m = RelationModel::init(2, 4, 1);
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let out = train(&m, &two_points(), &cfg).unwrap();
        assert_eq!(out.model, m);
        assert!(out.losses.is_empty());
    }

    #[test]
    fn non_finite_loss_aborts_with_step() {
        let mut m = RelationModel::init(2, 4, 1);
        m.params_mut().iter_mut().for_each(|p| *p = 1e300);
        let cfg = TrainConfig {
            steps: 5,
            batch_size: 4,
            ..TrainConfig::default()
        };
        match train(&m, &two_points(), &cfg) {
            Err(Error::Training { step, .. }) => assert_eq!(step, 0),
            other => panic!("expected training error, got {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let m = RelationModel::init(3, 4, 1);
        assert!(train(&m, &two_points(), &TrainConfig::default()).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = TrainConfig::default();
        let mut adam = Adam::new(2, &cfg);
        let mut p = vec![1.0, -1.0];
        adam.step(&mut p, &[0.5, -2.0]);
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p[1] - (-1.0 + 1e-3)).abs() < 1e-9);
    }
}
