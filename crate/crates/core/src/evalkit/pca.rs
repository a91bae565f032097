//! Principal components of latent vectors and rank correlation.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    /// Explained-variance ratios, non-increasing, summing to 1.
    pub ratios: Vec<f64>,
    /// Principal axes (unit vectors), matching `ratios`.
    pub components: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    /// Coordinates of each input on the first two components.
    pub projections: Vec<[f64; 2]>,
}

/// Eigenvalues and column eigenvectors (`vecs[i][k]` is entry `i` of vector `k`)
/// of a symmetric matrix.
pub fn symmetric_eigen(a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let m = DMatrix::from_fn(n, n, |i, j| a[i][j]);
    let eig = m.symmetric_eigen();
    let vecs = (0..n).map(|i| (0..n).map(|k| eig.eigenvectors[(i, k)]).collect()).collect();
    (eig.eigenvalues.iter().copied().collect(), vecs)
}

pub fn pca(points: &[Vec<f64>]) -> Result<PcaResult> {
    let n = points.len();
    if n < 2 {
        return Err(Error::Config("PCA needs at least two points".into()));
    }
    let d = points[0].len();
    if d == 0 || points.iter().any(|p| p.len() != d) {
        return Err(Error::Config("PCA points must share a nonzero dimension".into()));
    }
    let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for p in points {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (p[i] - mean[i]) * (p[j] - mean[j]);
            }
        }
    }
    for row in cov.iter_mut() {
        for v in row.iter_mut() {
            *v /= (n - 1) as f64;
        }
    }
    let (vals, vecs) = symmetric_eigen(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
    let vals: Vec<f64> = order.iter().map(|&k| vals[k].max(0.0)).collect();
    let total: f64 = vals.iter().sum();
    if total <= 0.0 {
        return Err(Error::Numerical("latents have zero variance".into()));
    }
    let components: Vec<Vec<f64>> = order.iter().map(|&k| (0..d).map(|i| vecs[i][k]).collect()).collect();
    let proj = |p: &Vec<f64>, c: &Vec<f64>| p.iter().zip(&mean).zip(c).map(|((x, m), w)| (x - m) * w).sum::<f64>();
    let projections = points.iter().map(|p| [proj(p, &components[0]), if d > 1 { proj(p, &components[1]) } else { 0.0 }]).collect();
    Ok(PcaResult { ratios: vals.iter().map(|v| v / total).collect(), components, mean, projections })
}

/// Average ranks (1-based), ties sharing their mean rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Spearman rank correlation.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}
