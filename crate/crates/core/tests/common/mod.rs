//! Independent reference computations shared by integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, SymmetricEigen};

/// Largest elementwise relative error, with `floor` guarding tiny entries.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Neighbour order of `i` by distance, ties by index, excluding `i`.
fn ranking(points: &[Vec<f64>], i: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..points.len()).filter(|&j| j != i).collect();
    idx.sort_by(|&a, &b| {
        euclid(&points[i], &points[a])
            .partial_cmp(&euclid(&points[i], &points[b]))
            .unwrap()
            .then(a.cmp(&b))
    });
    idx
}

/// Trustworthiness of `low` with respect to `high` at neighbourhood size `k`.
pub fn trustworthiness(high: &[Vec<f64>], low: &[Vec<f64>], k: usize) -> f64 {
    let n = high.len();
    assert_eq!(n, low.len());
    let mut penalty = 0.0;
    for i in 0..n {
        let hr = ranking(high, i);
        let mut rank = vec![0usize; n];
        for (r, &j) in hr.iter().enumerate() {
            rank[j] = r + 1;
        }
        for &j in ranking(low, i).iter().take(k) {
            if rank[j] > k {
                penalty += (rank[j] - k) as f64;
            }
        }
    }
    let (n, k) = (n as f64, k as f64);
    1.0 - 2.0 / (n * k * (2.0 * n - 3.0 * k - 1.0)) * penalty
}

/// Top-`k` eigenvectors (as rows) of the sample covariance, via nalgebra.
pub fn covariance_top_k(rows: &[Vec<f64>], k: usize) -> DMatrix<f64> {
    let n = rows.len();
    let d = rows[0].len();
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mean = x.row_mean();
    let mut c = x.clone();
    for mut r in c.row_iter_mut() {
        r -= &mean;
    }
    let cov = c.transpose() * &c / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    DMatrix::from_fn(k, d, |r, col| eig.eigenvectors[(col, order[r])])
}

/// Largest principal angle between the row spaces of two matrices with
/// orthonormal rows: `asin` of the largest singular value of the residual
/// of `a` after projection onto `b`.
pub fn max_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let residual = a - (a * b.transpose()) * b;
    let s = residual.singular_values().max();
    s.min(1.0).asin()
}

/// Block-average pooling of a `h × w` grid down to `out × out`; requires
/// both sides to be multiples of `out`.
pub fn block_pool(grid: &[f64], w: usize, h: usize, out: usize) -> Vec<f64> {
    assert!(w.is_multiple_of(out) && h.is_multiple_of(out));
    let (bw, bh) = (w / out, h / out);
    let mut res = vec![0.0; out * out];
    for oy in 0..out {
        for ox in 0..out {
            let mut s = 0.0;
            for y in oy * bh..(oy + 1) * bh {
                for x in ox * bw..(ox + 1) * bw {
                    s += grid[y * w + x];
                }
            }
            res[oy * out + ox] = s / (bw * bh) as f64;
        }
    }
    res
}

/// Stub scorer reading a probability table. Candidate features are `[i]`,
/// member features are `[1000 + g]`; the score is symmetric in its arguments.
pub struct TableScorer(pub Vec<Vec<f64>>);

impl pilesort_core::fewshot::RelationScorer for TableScorer {
    fn score(&self, a: &[f64], b: &[f64]) -> pilesort_core::Result<f64> {
        let (c, m) = if a[0] >= 1000.0 { (b[0], a[0]) } else { (a[0], b[0]) };
        Ok(self.0[c as usize][m as usize - 1000])
    }
}

/// Brute-force rule: first index of the maximum, kept if it reaches `threshold`.
pub fn brute_force_choice(row: &[f64], threshold: f64) -> Option<usize> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let first = row.iter().position(|&p| p == max)?;
    (max >= threshold).then_some(first)
}

/// Every `rows × cols` table over `values`, in odometer order.
pub fn all_tables(values: &[f64], rows: usize, cols: usize) -> impl Iterator<Item = Vec<Vec<f64>>> + '_ {
    let cells = rows * cols;
    let total = values.len().pow(cells as u32);
    (0..total).map(move |mut code| {
        let mut t = vec![vec![0.0; cols]; rows];
        for cell in 0..cells {
            t[cell / cols][cell % cols] = values[code % values.len()];
            code /= values.len();
        }
        t
    })
}

/// Runs `auto_group` over a stubbed table: one candidate per row, one
/// single-member group per column. Returns the chosen column per row.
pub fn auto_group_on_table(table: &[Vec<f64>], threshold: f64) -> Vec<Option<usize>> {
    use pilesort_core::fewshot::{auto_group, Candidate, GroupSupport};
    let cols = table[0].len();
    let cand_feats: Vec<[f64; 1]> = (0..table.len()).map(|i| [i as f64]).collect();
    let member_feats: Vec<[f64; 1]> = (0..cols).map(|g| [1000.0 + g as f64]).collect();
    let candidates: Vec<Candidate<'_>> = cand_feats
        .iter()
        .enumerate()
        .map(|(i, f)| Candidate { image_id: format!("i{i}"), features: f })
        .collect();
    let groups: Vec<GroupSupport<'_>> = member_feats
        .iter()
        .enumerate()
        .map(|(g, f)| GroupSupport { group_id: format!("g{g}"), members: vec![f.as_slice()] })
        .collect();
    let scorer = TableScorer(table.to_vec());
    auto_group(&scorer, &candidates, &groups, threshold, pilesort_core::Exec::Serial)
        .unwrap()
        .into_iter()
        .map(|a| a.chosen_group.map(|g| g[1..].parse().unwrap()))
        .collect()
}
