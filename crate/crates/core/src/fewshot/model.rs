use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::features::ExtractorSpec;
use crate::par::Exec;

pub const DEFAULT_HIDDEN: usize = 64;

/// Examples per work unit when accumulating batch gradients. Fixed so the
/// summation order never depends on the thread count.
const GRAD_CHUNK: usize = 8;

/// Symmetric pair encoding: `[|a − b|, a ⊙ b]`.
pub fn pair_features(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let mut out = Vec::with_capacity(2 * a.len());
    out.extend(a.iter().zip(b).map(|(x, y)| (x - y).abs()));
    out.extend(a.iter().zip(b).map(|(x, y)| x * y));
    Ok(out)
}

/// Anything that can score "does `a` belong with `b`".
pub trait RelationScorer: Sync {
    fn score(&self, a: &[f64], b: &[f64]) -> Result<f64>;
}

/// `[2D] → ReLU(H) → sigmoid(1)`.
///
/// Parameters live in one flat buffer laid out as
/// `W1 (H × 2D, row-major) | b1 (H) | w2 (H) | b2 (1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationModel {
    feature_dim: usize,
    hidden: usize,
    params: Vec<f64>,
    pub seed: u64,
    /// Extractor the model expects features from; `None` for external features.
    pub extractor: Option<ExtractorSpec>,
}

/// One labelled training pair.
#[derive(Debug, Clone, Copy)]
pub struct LabeledPair<'a> {
    pub a: &'a [f64],
    pub b: &'a [f64],
    pub same: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradient {
    /// Same layout as [`RelationModel::params`].
    pub grads: Vec<f64>,
    /// Mean binary cross-entropy.
    pub loss: f64,
}

const OUTPUT_EPS: f64 = 1e-12;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl RelationModel {
    pub fn param_count(feature_dim: usize, hidden: usize) -> usize {
        hidden * 2 * feature_dim + 2 * hidden + 1
    }

    pub fn zeros(feature_dim: usize, hidden: usize) -> Self {
        Self {
            feature_dim,
            hidden,
            params: vec![0.0; Self::param_count(feature_dim, hidden)],
            seed: 0,
            extractor: None,
        }
    }

    /// He-normal hidden weights, small output weights, zero biases.
    pub fn init(feature_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut m = Self::zeros(feature_dim, hidden);
        m.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in = (2 * feature_dim) as f64;
        let w1 = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let w2 = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).expect("valid std");
        let (w1_len, h) = (hidden * 2 * feature_dim, hidden);
        for v in &mut m.params[..w1_len] {
            *v = w1.sample(&mut rng);
        }
        for v in &mut m.params[w1_len + h..w1_len + 2 * h] {
            *v = w2.sample(&mut rng);
        }
        m
    }

    pub fn from_params(feature_dim: usize, hidden: usize, params: Vec<f64>) -> Result<Self> {
        let expected = Self::param_count(feature_dim, hidden);
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: params.len(),
            });
        }
        if feature_dim == 0 || hidden == 0 {
            return Err(Error::invalid("layer sizes must be positive"));
        }
        Ok(Self {
            feature_dim,
            hidden,
            params,
            seed: 0,
            extractor: None,
        })
    }

    pub fn with_extractor(mut self, extractor: ExtractorSpec) -> Self {
        self.extractor = Some(extractor);
        self
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn layer_sizes(&self) -> [usize; 3] {
        [2 * self.feature_dim, self.hidden, 1]
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn split(&self) -> (&[f64], &[f64], &[f64], f64) {
        let w1_len = self.hidden * 2 * self.feature_dim;
        let h = self.hidden;
        let (w1, rest) = self.params.split_at(w1_len);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(h);
        (w1, b1, w2, b2[0])
    }

    fn check_input(&self, a: &[f64], b: &[f64]) -> Result<()> {
        for v in [a, b] {
            if v.len() != self.feature_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.feature_dim,
                    found: v.len(),
                });
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    /// Hidden activations and output logit for a pair vector.
    fn hidden_and_logit(&self, pair: &[f64], hidden: &mut [f64]) -> f64 {
        let (w1, b1, w2, b2) = self.split();
        let n_in = pair.len();
        for (k, h) in hidden.iter_mut().enumerate() {
            let row = &w1[k * n_in..(k + 1) * n_in];
            let pre: f64 = row.iter().zip(pair).map(|(w, x)| w * x).sum::<f64>() + b1[k];
            *h = pre.max(0.0);
        }
        hidden.iter().zip(w2).map(|(h, w)| h * w).sum::<f64>() + b2
    }

    pub fn logit(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        self.check_input(a, b)?;
        if !self.is_finite() {
            return Err(Error::invalid("relation model has non-finite parameters"));
        }
        let pair = pair_features(a, b)?;
        let mut hidden = vec![0.0; self.hidden];
        Ok(self.hidden_and_logit(&pair, &mut hidden))
    }

    /// Probability that `a` and `b` belong together; in `[1e-12, 1 − 1e-12]`.
    pub fn forward(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.logit(a, b)?).clamp(OUTPUT_EPS, 1.0 - OUTPUT_EPS))
    }

    /// Mean binary cross-entropy over `batch` and its exact gradient.
    pub fn gradient(&self, batch: &[LabeledPair<'_>], exec: Exec) -> Result<ModelGradient> {
        if batch.is_empty() {
            return Err(Error::invalid("gradient of an empty batch"));
        }
        for p in batch {
            self.check_input(p.a, p.b)?;
        }
        let n_params = self.params.len();
        let chunks = batch.len().div_ceil(GRAD_CHUNK);
        let partials = exec.map(chunks, |c| {
            let lo = c * GRAD_CHUNK;
            let hi = (lo + GRAD_CHUNK).min(batch.len());
            let mut g = vec![0.0; n_params];
            let mut loss = 0.0;
            let mut hidden = vec![0.0; self.hidden];
            for ex in &batch[lo..hi] {
                loss += self.accumulate(ex, &mut hidden, &mut g);
            }
            (g, loss)
        });
        let mut grads = vec![0.0; n_params];
        let mut loss = 0.0;
        for (g, l) in partials {
            grads.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            loss += l;
        }
        let n = batch.len() as f64;
        grads.iter_mut().for_each(|g| *g /= n);
        Ok(ModelGradient { grads, loss: loss / n })
    }

    /// Adds one example's gradient into `g`; returns its loss.
    fn accumulate(&self, ex: &LabeledPair<'_>, hidden: &mut [f64], g: &mut [f64]) -> f64 {
        let pair = pair_features(ex.a, ex.b).expect("lengths checked");
        let z = self.hidden_and_logit(&pair, hidden);
        let y = if ex.same { 1.0 } else { 0.0 };
        let loss = softplus(z) - y * z;
        let dz = sigmoid(z) - y;

        let (_, _, w2, _) = self.split();
        let n_in = pair.len();
        let h = self.hidden;
        let w1_len = h * n_in;
        let (gw1, rest) = g.split_at_mut(w1_len);
        let (gb1, rest) = rest.split_at_mut(h);
        let (gw2, gb2) = rest.split_at_mut(h);
        gb2[0] += dz;
        for k in 0..h {
            gw2[k] += dz * hidden[k];
            if hidden[k] > 0.0 {
                let dpre = dz * w2[k];
                gb1[k] += dpre;
                gw1[k * n_in..(k + 1) * n_in]
                    .iter_mut()
                    .zip(&pair)
                    .for_each(|(gw, x)| *gw += dpre * x);
            }
        }
        loss
    }

    /// Mean BCE without gradient; used by finite-difference checks.
    pub fn loss(&self, batch: &[LabeledPair<'_>]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::invalid("loss of an empty batch"));
        }
        let mut total = 0.0;
        for ex in batch {
            let z = self.logit(ex.a, ex.b)?;
            let y = if ex.same { 1.0 } else { 0.0 };
            total += softplus(z) - y * z;
        }
        Ok(total / batch.len() as f64)
    }
}

impl RelationScorer for RelationModel {
    fn score(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        self.forward(a, b)
    }
}
