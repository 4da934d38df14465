use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, symmetric_eigen, Matrix};
use crate::par::Exec;

pub const DEFAULT_PCA_DIMS: usize = 8;

/// Principal directions of a centred data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `k' × D`, rows orthonormal.
    pub components: Matrix,
    /// Sample variance (n − 1 denominator) along each component, non-increasing.
    pub explained_variance: Vec<f64>,
}

impl PcaModel {
    pub fn n_components(&self) -> usize {
        self.components.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        let centred: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok(self.components.row_iter().map(|c| dot(c, &centred)).collect())
    }

    pub fn transform_batch(&self, x: &Matrix) -> Result<Matrix> {
        let rows = x.row_iter().map(|r| self.transform(r)).collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, self.n_components()));
        }
        Matrix::from_rows(&rows)
    }

    /// Fraction of total variance captured by each component.
    pub fn explained_ratio(&self, total_variance: f64) -> Vec<f64> {
        self.explained_variance.iter().map(|v| v / total_variance).collect()
    }
}

pub fn pca_fit(x: &Matrix, k: usize) -> Result<PcaModel> {
    pca_fit_with(x, k, Exec::default())
}

/// Fits `min(k, D, n − 1)` components. When there are fewer samples than
/// dimensions the eigenproblem is solved on the `n × n` Gram matrix instead
/// of the `D × D` covariance.
pub fn pca_fit_with(x: &Matrix, k: usize, exec: Exec) -> Result<PcaModel> {
    let n = x.rows();
    let d = x.cols();
    if n < 2 {
        return Err(Error::invalid("PCA needs at least two samples"));
    }
    if k == 0 || d == 0 {
        return Err(Error::invalid("PCA needs k >= 1 and at least one dimension"));
    }
    if !x.is_finite() {
        return Err(Error::invalid("PCA input contains non-finite values"));
    }
    let kk = k.min(d).min(n - 1);

    let mut mean = vec![0.0; d];
    for r in x.row_iter() {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut xc = x.clone();
    for i in 0..n {
        xc.row_mut(i).iter_mut().zip(&mean).for_each(|(v, m)| *v -= m);
    }
    let denom = (n - 1) as f64;

    let (values, mut components) = if d <= n {
        // covariance D x D
        let xt = xc.transpose();
        let rows = exec.map(d, |a| {
            (0..d).map(|b| dot(xt.row(a), xt.row(b)) / denom).collect::<Vec<_>>()
        });
        let cov = Matrix::from_rows(&rows)?;
        let (vals, vecs) = symmetric_eigen(&cov)?;
        let mut comps = Matrix::zeros(kk, d);
        for i in 0..kk {
            comps.row_mut(i).copy_from_slice(vecs.row(i));
        }
        (vals[..kk].to_vec(), comps)
    } else {
        // Gram n x n: Xc Xc^T u = (n-1) λ u, component = Xc^T u / ‖Xc^T u‖
        let rows = exec.map(n, |a| (0..n).map(|b| dot(xc.row(a), xc.row(b)) / denom).collect::<Vec<_>>());
        let gram = Matrix::from_rows(&rows)?;
        let (vals, vecs) = symmetric_eigen(&gram)?;
        let mut comps = Matrix::zeros(kk, d);
        for i in 0..kk {
            let u = vecs.row(i);
            let c = comps.row_mut(i);
            for (j, r) in xc.row_iter().enumerate() {
                for (cv, rv) in c.iter_mut().zip(r) {
                    *cv += u[j] * rv;
                }
            }
            let norm = dot(c, c).sqrt();
            if norm > 0.0 {
                c.iter_mut().for_each(|v| *v /= norm);
            }
        }
        (vals[..kk].to_vec(), comps)
    };

    // Gram-route vectors lose a little orthogonality when eigenvalues cluster.
    reorthonormalize(&mut components);
    for i in 0..kk {
        fix_sign(components.row_mut(i));
    }
    let explained_variance = values.into_iter().map(|v| v.max(0.0)).collect();
    Ok(PcaModel {
        mean,
        components,
        explained_variance,
    })
}

fn reorthonormalize(m: &mut Matrix) {
    for i in 0..m.rows() {
        for j in 0..i {
            let proj = dot(m.row(i), m.row(j));
            let rj = m.row(j).to_vec();
            m.row_mut(i).iter_mut().zip(&rj).for_each(|(a, b)| *a -= proj * b);
        }
        let norm = dot(m.row(i), m.row(i)).sqrt();
        if norm > 0.0 {
            m.row_mut(i).iter_mut().for_each(|v| *v /= norm);
        }
    }
}

/// Largest-magnitude entry positive; ties resolved to the first index.
fn fix_sign(c: &mut [f64]) {
    let mut best = 0;
    for (i, v) in c.iter().enumerate() {
        if v.abs() > c[best].abs() {
            best = i;
        }
    }
    if c[best] < 0.0 {
        c.iter_mut().for_each(|v| *v = -*v);
    }
}
