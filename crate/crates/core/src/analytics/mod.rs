//! Structural analysis of survey data: PCA, Ward clustering in PCA space,
//! simple-matching similarity, feature correlations and locality outliers.

pub mod cluster;
pub mod correlation;
pub mod eigen;
pub mod export;
pub mod outlier;
pub mod pca;
pub mod similarity;

pub use cluster::{cut_tree, ward_cluster, ClusterTree, Merge};
pub use correlation::{correlation_report, pearson_matrix, CorrelationEdge, CorrelationReport};
pub use eigen::{jacobi_eigen, SymmetricEigen};
pub use export::{
    correlation_dot, correlogram_svg, dendrogram_svg, leaf_order, similarity_histogram_csv, similarity_histogram_svg,
};
pub use outlier::{locality_outlier_check, FeatureDeviation, OutlierCheck};
pub use pca::{inverse_project, min_components_for, pca, project, PcaResult};
pub use similarity::{match_count, similarity, similarity_stats, SimilarityStats};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::schema::Dataset;

/// Share of variance the default clustering space must retain.
pub const DEFAULT_EVR_TARGET: f64 = 0.85;

/// Row-major vectors to an `n × d` matrix.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().find(|r| r.len() != d) {
        return Err(Error::DimensionMismatch { expected: d, got: bad.len() });
    }
    Ok(DMatrix::from_fn(n, d, |i, j| rows[i][j]))
}

/// PCA, Ward tree and flat labels for a validated dataset.
#[derive(Debug, Clone)]
pub struct ClusterAnalysis {
    pub pca: PcaResult,
    pub dims: usize,
    pub projected: DMatrix<f64>,
    pub tree: ClusterTree,
    pub labels: Vec<usize>,
}

/// Clusters `d` in the space of its first `dims` principal components
/// (default: enough to explain 85% of variance), then cuts into `clusters`.
pub fn cluster_dataset(d: &Dataset, dims: Option<usize>, clusters: usize) -> Result<ClusterAnalysis> {
    let data = matrix_from_rows(&d.normalized_rows()?)?;
    let p = pca(&data)?;
    let dims = dims.unwrap_or_else(|| min_components_for(DEFAULT_EVR_TARGET, &p)).clamp(1, p.dim());
    let projected = project(&data, &p, dims)?;
    let tree = ward_cluster(&projected);
    let labels = cut_tree(&tree, clusters.min(d.records.len()))?;
    Ok(ClusterAnalysis { pca: p, dims, projected, tree, labels })
}
