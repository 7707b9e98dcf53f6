use nalgebra::DMatrix;
use serde::Serialize;

use super::eigen::jacobi_eigen;
use crate::error::{Error, Result};

/// Standard deviations below this count as constant columns.
const CONSTANT_STD: f64 = 1e-12;

/// Principal components of a standardized record matrix.
#[derive(Debug, Clone, Serialize)]
pub struct PcaResult {
    /// `d × d`, column `i` holds the loadings of component `i`.
    #[serde(skip)]
    pub components: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    /// All zeros when the data has no variance at all.
    pub explained_variance_ratio: Vec<f64>,
    pub means: Vec<f64>,
    pub stddevs: Vec<f64>,
    pub constant_features: Vec<usize>,
}

impl PcaResult {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn total_variance(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }

    /// No variance in any column: ratios are undefined.
    pub fn is_degenerate(&self) -> bool {
        self.total_variance() <= 0.0
    }

    pub fn first_loadings(&self) -> Vec<f64> {
        self.components.column(0).iter().copied().collect()
    }

    /// Centers and scales `rows` with this result's parameters.
    pub fn standardize(&self, rows: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if rows.ncols() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: rows.ncols() });
        }
        let mut z = rows.clone();
        for j in 0..z.ncols() {
            for i in 0..z.nrows() {
                z[(i, j)] = (z[(i, j)] - self.means[j]) / self.stddevs[j];
            }
        }
        Ok(z)
    }
}

/// Standardizes columns, builds their covariance and diagonalizes it.
///
/// Constant columns keep stddev 1, so they center to zero and carry no
/// variance.
pub fn pca(data: &DMatrix<f64>) -> Result<PcaResult> {
    let (n, d) = data.shape();
    if n < 2 || d < 1 {
        return Err(Error::InsufficientData(format!("pca needs >= 2 records and >= 1 feature, got {n}x{d}")));
    }
    let mut means = Vec::with_capacity(d);
    let mut stddevs = Vec::with_capacity(d);
    let mut constant_features = Vec::new();
    for j in 0..d {
        let col = data.column(j);
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        let sd = var.sqrt();
        means.push(mean);
        if sd < CONSTANT_STD {
            constant_features.push(j);
            stddevs.push(1.0);
        } else {
            stddevs.push(sd);
        }
    }

    let mut z = data.clone();
    for j in 0..d {
        for i in 0..n {
            z[(i, j)] = if constant_features.contains(&j) { 0.0 } else { (z[(i, j)] - means[j]) / stddevs[j] };
        }
    }
    let cov = (z.transpose() * &z) / (n - 1) as f64;
    let eig = jacobi_eigen(&cov);
    let eigenvalues: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    let total: f64 = eigenvalues.iter().sum();
    let explained_variance_ratio = if total > 0.0 {
        eigenvalues.iter().map(|l| l / total).collect()
    } else {
        vec![0.0; d]
    };
    Ok(PcaResult { components: eig.eigenvectors, eigenvalues, explained_variance_ratio, means, stddevs, constant_features })
}

/// Smallest `k` whose cumulative explained variance reaches `target`.
///
/// Degenerate results report the full dimension.
pub fn min_components_for(target: f64, p: &PcaResult) -> usize {
    let mut cum = 0.0;
    for (i, r) in p.explained_variance_ratio.iter().enumerate() {
        cum += r;
        if cum >= target - 1e-12 {
            return i + 1;
        }
    }
    p.dim()
}

/// Projects standardized `rows` onto the first `k` components.
pub fn project(rows: &DMatrix<f64>, p: &PcaResult, k: usize) -> Result<DMatrix<f64>> {
    if k == 0 || k > p.dim() {
        return Err(Error::DimensionMismatch { expected: p.dim(), got: k });
    }
    let z = p.standardize(rows)?;
    Ok(z * p.components.columns(0, k))
}

/// Maps component scores back to standardized feature space.
pub fn inverse_project(scores: &DMatrix<f64>, p: &PcaResult) -> Result<DMatrix<f64>> {
    let k = scores.ncols();
    if k == 0 || k > p.dim() {
        return Err(Error::DimensionMismatch { expected: p.dim(), got: k });
    }
    Ok(scores * p.components.columns(0, k).transpose())
}
