//! Exact O(n²) t-SNE.
//!
//! Affinities come from per-point Gaussian kernels whose bandwidths are
//! bisected to a target perplexity, symmetrised as
//! `p_ij = (p_j|i + p_i|j) / 2n`. The embedding uses a Student-t kernel with
//! one degree of freedom and is optimised by momentum gradient descent with
//! early exaggeration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sq_dist, Matrix};
use crate::par::{Control, Exec};

const PERPLEXITY_TOL: f64 = 1e-5;
const MAX_BISECTION_STEPS: usize = 64;
const P_FLOOR: f64 = 1e-12;
const KL_EVERY: usize = 50;
const INIT_STD: f64 = 1e-4;
const MIN_GAIN: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TsneParams {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    /// Iteration at which momentum switches from initial to final.
    pub momentum_switch_iter: usize,
    /// Per-coordinate step gains (grow by 0.2 when the gradient flips sign
    /// against the update, shrink by 0.8 otherwise, floored at 0.01).
    #[serde(default = "default_gains")]
    pub adaptive_gains: bool,
    pub seed: u64,
}

fn default_gains() -> bool {
    true
}

impl Default for TsneParams {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch_iter: 250,
            adaptive_gains: true,
            seed: 0,
        }
    }
}

impl TsneParams {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.perplexity > 0.0
            && self.iterations > 0
            && self.learning_rate > 0.0
            && self.early_exaggeration > 0.0
            && self.initial_momentum >= 0.0
            && self.final_momentum >= 0.0;
        if !positive {
            return Err(Error::invalid("t-SNE parameters must be positive"));
        }
        if self.exaggeration_iters >= self.iterations {
            return Err(Error::invalid("early exaggeration must end before the last iteration"));
        }
        Ok(())
    }

    /// Perplexity actually used for `n` points: at most `(n − 1) / 3`, never below 1.
    pub fn effective_perplexity(&self, n: usize) -> f64 {
        let cap = (n.saturating_sub(1) as f64 / 3.0).max(1.0);
        self.perplexity.min(cap)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlCheckpoint {
    pub iteration: usize,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneResult {
    /// `n × 2`.
    pub coords: Matrix,
    pub kl_trace: Vec<KlCheckpoint>,
    pub params_used: TsneParams,
}

impl TsneResult {
    /// KL at the checkpoint closing the exaggeration phase, if recorded.
    pub fn kl_after_exaggeration(&self) -> Option<f64> {
        self.kl_trace
            .iter()
            .find(|c| c.iteration >= self.params_used.exaggeration_iters)
            .map(|c| c.kl)
    }

    pub fn final_kl(&self) -> Option<f64> {
        self.kl_trace.last().map(|c| c.kl)
    }
}

/// One calibrated conditional distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub sigma: f64,
    pub row: Vec<f64>,
    pub perplexity: f64,
    /// All distances were zero; `row` is uniform.
    pub degenerate: bool,
}

/// Row probabilities and perplexity (`exp` of the Shannon entropy in nats)
/// for precision `beta = 1 / 2σ²`. Distances are shifted by their minimum,
/// which cancels in the normalisation.
fn row_at(shifted: &[f64], beta: f64, row: &mut [f64]) -> f64 {
    let mut sum = 0.0;
    let mut weighted = 0.0;
    for (p, &d) in row.iter_mut().zip(shifted) {
        *p = (-d * beta).exp();
        sum += *p;
        weighted += d * *p;
    }
    row.iter_mut().for_each(|p| *p /= sum);
    let entropy = sum.ln() + beta * weighted / sum;
    entropy.exp()
}

/// Bisects the Gaussian bandwidth for one point's neighbour distances.
pub fn perplexity_calibrate(sq_distances: &[f64], target_perplexity: f64) -> Result<Calibration> {
    if sq_distances.is_empty() {
        return Err(Error::invalid("perplexity calibration needs at least one neighbour"));
    }
    if sq_distances.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(Error::invalid("squared distances must be finite and non-negative"));
    }
    if target_perplexity.is_nan() || target_perplexity <= 0.0 {
        return Err(Error::invalid("target perplexity must be positive"));
    }
    let m = sq_distances.len();
    let dmin = sq_distances.iter().copied().fold(f64::INFINITY, f64::min);
    let dmax = sq_distances.iter().copied().fold(0.0, f64::max);
    if dmax == 0.0 {
        return Ok(Calibration {
            sigma: f64::INFINITY,
            row: vec![1.0 / m as f64; m],
            perplexity: m as f64,
            degenerate: true,
        });
    }
    let shifted: Vec<f64> = sq_distances.iter().map(|d| d - dmin).collect();
    let mean_shift = shifted.iter().sum::<f64>() / m as f64;

    let mut beta = 1.0 / mean_shift.max(f64::MIN_POSITIVE);
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    let mut row = vec![0.0; m];
    let mut perp = row_at(&shifted, beta, &mut row);
    // A target at or above the neighbour count is only reached as beta -> 0;
    // keep flattening instead of stopping at the tolerance.
    let attainable = target_perplexity < m as f64;
    for _ in 0..MAX_BISECTION_STEPS {
        if attainable && (perp - target_perplexity).abs() < PERPLEXITY_TOL {
            break;
        }
        if perp > target_perplexity {
            // too flat: sharpen
            lo = beta;
            beta = if hi.is_finite() { geometric_mid(lo, hi) } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = if lo > 0.0 { geometric_mid(lo, hi) } else { beta / 2.0 };
        }
        perp = row_at(&shifted, beta, &mut row);
    }
    Ok(Calibration {
        sigma: (1.0 / (2.0 * beta)).sqrt(),
        row,
        perplexity: perp,
        degenerate: false,
    })
}

fn geometric_mid(lo: f64, hi: f64) -> f64 {
    let mid = (lo * hi).sqrt();
    if mid > lo && mid < hi {
        mid
    } else {
        (lo + hi) / 2.0
    }
}

/// Symmetric joint affinities `P` (zero diagonal, entries summing to 1).
pub fn joint_probabilities(x: &Matrix, perplexity: f64, exec: Exec) -> Result<Matrix> {
    let n = x.rows();
    if n < 2 {
        return Err(Error::invalid("joint probabilities need at least two points"));
    }
    let rows = exec.map(n, |i| -> Result<Vec<f64>> {
        let d: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| sq_dist(x.row(i), x.row(j))).collect();
        let cal = perplexity_calibrate(&d, perplexity)?;
        let mut full = Vec::with_capacity(n);
        full.extend_from_slice(&cal.row[..i]);
        full.push(0.0);
        full.extend_from_slice(&cal.row[i..]);
        Ok(full)
    });
    let cond = Matrix::from_rows(&rows.into_iter().collect::<Result<Vec<_>>>()?)?;
    let mut p = Matrix::zeros(n, n);
    let scale = 2.0 * n as f64;
    for i in 0..n {
        for j in 0..n {
            p[(i, j)] = (cond[(i, j)] + cond[(j, i)]) / scale;
        }
    }
    Ok(p)
}

fn check_shapes(p: &Matrix, y: &Matrix) -> Result<()> {
    if p.rows() != p.cols() || p.rows() != y.rows() || y.cols() != 2 {
        return Err(Error::invalid("P must be n×n and Y n×2"));
    }
    Ok(())
}

/// Per-row sums of the unnormalised Student-t kernel, combined in row order.
fn kernel_total(y: &Matrix, exec: Exec) -> f64 {
    let n = y.rows();
    exec.map(n, |i| {
        (0..n)
            .filter(|&j| j != i)
            .map(|j| 1.0 / (1.0 + sq_dist(y.row(i), y.row(j))))
            .sum::<f64>()
    })
    .iter()
    .sum()
}

/// `KL(P ‖ Q)` with the embedding kernel normalised over all ordered pairs.
pub fn kl_divergence(p: &Matrix, y: &Matrix) -> Result<f64> {
    kl_divergence_with(p, y, Exec::default())
}

fn kl_divergence_with(p: &Matrix, y: &Matrix, exec: Exec) -> Result<f64> {
    check_shapes(p, y)?;
    let n = y.rows();
    let z = kernel_total(y, exec);
    let per_row = exec.map(n, |i| {
        let mut s = 0.0;
        for j in 0..n {
            let pij = p[(i, j)];
            if j == i || pij <= 0.0 {
                continue;
            }
            let q = 1.0 / (1.0 + sq_dist(y.row(i), y.row(j))) / z;
            s += pij * (pij.max(P_FLOOR).ln() - q.ln());
        }
        s
    });
    Ok(per_row.iter().sum())
}

/// Gradient of `KL(αP ‖ Q)` with respect to the embedding, row-major `n × 2`:
/// `4 Σ_j (α p_ij − q_ij)(y_i − y_j)(1 + ‖y_i − y_j‖²)⁻¹`.
pub fn kl_gradient(p: &Matrix, y: &Matrix, exaggeration: f64, exec: Exec) -> Result<Matrix> {
    check_shapes(p, y)?;
    let n = y.rows();
    let z = kernel_total(y, exec);
    let mut grad = Matrix::zeros(n, 2);
    exec.for_each_chunk_mut(grad.as_mut_slice(), 2, |i, g| {
        let yi = y.row(i);
        let (mut gx, mut gy) = (0.0, 0.0);
        for j in 0..n {
            if j == i {
                continue;
            }
            let yj = y.row(j);
            let num = 1.0 / (1.0 + sq_dist(yi, yj));
            let mult = (exaggeration * p[(i, j)] - num / z) * num;
            gx += mult * (yi[0] - yj[0]);
            gy += mult * (yi[1] - yj[1]);
        }
        g[0] = 4.0 * gx;
        g[1] = 4.0 * gy;
    });
    Ok(grad)
}

pub fn tsne_embed(params: &TsneParams, x: &Matrix) -> Result<TsneResult> {
    tsne_embed_with(params, x, &Control::default())
}

pub fn tsne_embed_with(params: &TsneParams, x: &Matrix, ctl: &Control) -> Result<TsneResult> {
    params.validate()?;
    let n = x.rows();
    if n < 2 {
        return Err(Error::invalid("t-SNE needs at least two points"));
    }
    if !x.is_finite() {
        return Err(Error::invalid("t-SNE input contains non-finite values"));
    }
    let mut used = *params;
    used.perplexity = params.effective_perplexity(n);
    let p = joint_probabilities(x, used.perplexity, ctl.exec)?;

    let mut rng = ChaCha8Rng::seed_from_u64(used.seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
    let mut y = Matrix::zeros(n, 2);
    y.as_mut_slice().iter_mut().for_each(|v| *v = normal.sample(&mut rng));
    let mut velocity = vec![0.0; 2 * n];
    let mut gains = vec![1.0f64; 2 * n];
    let mut kl_trace = Vec::new();

    for it in 0..used.iterations {
        ctl.check()?;
        let exaggeration = if it < used.exaggeration_iters { used.early_exaggeration } else { 1.0 };
        let momentum = if it < used.momentum_switch_iter { used.initial_momentum } else { used.final_momentum };
        let grad = kl_gradient(&p, &y, exaggeration, ctl.exec)?;
        let coords = velocity.iter_mut().zip(&mut gains).zip(y.as_mut_slice()).zip(grad.as_slice());
        for (((v, gain), yv), g) in coords {
            if used.adaptive_gains {
                *gain = if *v * g < 0.0 { *gain + 0.2 } else { (*gain * 0.8).max(MIN_GAIN) };
            }
            *v = momentum * *v - used.learning_rate * *gain * g;
            *yv += *v;
        }
        recentre(&mut y);
        if !y.is_finite() {
            return Err(Error::Optimizer {
                iteration: it + 1,
                message: "embedding coordinates became non-finite".into(),
            });
        }
        let done = it + 1;
        if done % KL_EVERY == 0 || done == used.iterations {
            let kl = kl_divergence_with(&p, &y, ctl.exec)?;
            kl_trace.push(KlCheckpoint { iteration: done, kl });
        }
        ctl.report(done as f64 / used.iterations as f64);
    }
    Ok(TsneResult {
        coords: y,
        kl_trace,
        params_used: used,
    })
}

fn recentre(y: &mut Matrix) {
    let n = y.rows() as f64;
    let (mut mx, mut my) = (0.0, 0.0);
    for r in y.row_iter() {
        mx += r[0];
        my += r[1];
    }
    let (mx, my) = (mx / n, my / n);
    for i in 0..y.rows() {
        let r = y.row_mut(i);
        r[0] -= mx;
        r[1] -= my;
    }
}
