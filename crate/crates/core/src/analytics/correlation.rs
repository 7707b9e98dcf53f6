use nalgebra::DMatrix;
use serde::Serialize;

use super::pca::pca;
use crate::error::{Error, Result};
use crate::schema::Dataset;

const CONSTANT_VAR: f64 = 1e-24;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationEdge {
    pub a: usize,
    pub b: usize,
    pub r: f64,
}

/// Pearson correlations among features, with features ordered by their
/// first principal component loading.
#[derive(Debug, Clone, Serialize)]
pub struct CorrelationReport {
    pub feature_ids: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    pub feature_order: Vec<usize>,
    pub constant_features: Vec<usize>,
    pub tau: f64,
    pub positive_edges: Vec<CorrelationEdge>,
}

impl CorrelationReport {
    /// Unordered pairs `a < b` with `r >= tau`.
    pub fn positive_edges_at(&self, tau: f64) -> Vec<CorrelationEdge> {
        let d = self.matrix.len();
        let mut edges = Vec::new();
        for a in 0..d {
            for b in (a + 1)..d {
                let r = self.matrix[a][b];
                if r >= tau {
                    edges.push(CorrelationEdge { a, b, r });
                }
            }
        }
        edges
    }
}

/// Pearson correlation matrix of the columns of `data`.
///
/// Constant columns correlate 0 with everything else and are returned in the
/// second element. The diagonal is always 1.
pub fn pearson_matrix(data: &DMatrix<f64>) -> (DMatrix<f64>, Vec<usize>) {
    let (n, d) = data.shape();
    let means: Vec<f64> = (0..d).map(|j| data.column(j).sum() / n as f64).collect();
    let mut centered = data.clone();
    for j in 0..d {
        for i in 0..n {
            centered[(i, j)] -= means[j];
        }
    }
    let cross = centered.transpose() * &centered;
    let constant: Vec<usize> = (0..d).filter(|&j| cross[(j, j)] <= CONSTANT_VAR).collect();
    let mut r = DMatrix::<f64>::identity(d, d);
    for a in 0..d {
        for b in (a + 1)..d {
            let v = if constant.contains(&a) || constant.contains(&b) {
                0.0
            } else {
                (cross[(a, b)] / (cross[(a, a)] * cross[(b, b)]).sqrt()).clamp(-1.0, 1.0)
            };
            r[(a, b)] = v;
            r[(b, a)] = v;
        }
    }
    (r, constant)
}

pub fn correlation_report(d: &Dataset, tau: f64) -> Result<CorrelationReport> {
    let n = d.records.len();
    if n < 3 {
        return Err(Error::InsufficientData(format!("correlation needs >= 3 records, got {n}")));
    }
    let rows = d.normalized_rows()?;
    let data = DMatrix::from_fn(n, d.schema.len(), |i, j| rows[i][j]);
    let (matrix, constant_features) = pearson_matrix(&data);
    let loadings = pca(&data)?.first_loadings();
    let mut feature_order: Vec<usize> = (0..d.schema.len()).collect();
    feature_order.sort_by(|&a, &b| loadings[b].total_cmp(&loadings[a]).then(a.cmp(&b)));

    let mut report = CorrelationReport {
        feature_ids: d.schema.feature_ids(),
        matrix: (0..matrix.nrows()).map(|i| matrix.row(i).iter().copied().collect()).collect(),
        feature_order,
        constant_features,
        tau,
        positive_edges: Vec::new(),
    };
    report.positive_edges = report.positive_edges_at(tau);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{FeatureDef, FeatureKind, FeatureSchema, SurveyRecord};
    use approx::assert_abs_diff_eq;

    fn numeric_dataset(columns: &[Vec<f64>]) -> Dataset {
        let d = columns.len();
        let schema = FeatureSchema::new(
            1,
            (0..d).map(|i| FeatureDef::new(format!("f{i}"), FeatureKind::BoundedNumeric { lo: -10.0, hi: 10.0 }, "")).collect(),
        )
        .unwrap();
        let n = columns[0].len();
        let records = (0..n)
            .map(|i| SurveyRecord {
                subject_id: format!("s{i}"),
                locality_id: "L".into(),
                values: columns.iter().map(|c| c[i]).collect(),
                collected_at: 0,
            })
            .collect();
        Dataset::new(schema, records)
    }

    #[test]
    fn duplicate_and_negated_columns() {
        let x = vec![1.0, 2.0, 4.0, 3.0, 0.0];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let rep = correlation_report(&numeric_dataset(&[x.clone(), x.clone(), neg]), 0.5).unwrap();
        assert_abs_diff_eq!(rep.matrix[0][1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rep.matrix[0][2], -1.0, epsilon = 1e-12);
        assert_eq!(rep.positive_edges.len(), 1);
        assert_eq!((rep.positive_edges[0].a, rep.positive_edges[0].b), (0, 1));
        for i in 0..3 {
            assert_eq!(rep.matrix[i][i], 1.0);
        }
    }

    #[test]
    fn hand_computed_pearson() {
        // deviations x:(-1,0,1) y:(-1,1,0) z:(4/3,-2/3,-2/3)
        // sxx = syy = 2, szz = 8/3, sxy = 1, sxz = syz = -2
        let x = vec![1.0, 2.0, 3.0];
        let y = vec![1.0, 3.0, 2.0];
        let z = vec![3.0, 1.0, 1.0];
        let rep = correlation_report(&numeric_dataset(&[x, y, z]), 0.5).unwrap();
        let r_xy = 0.5;
        let r_xz = -(3.0f64).sqrt() / 2.0;
        let r_yz = -(3.0f64).sqrt() / 2.0;
        assert_abs_diff_eq!(rep.matrix[0][1], r_xy, epsilon = 1e-9);
        assert_abs_diff_eq!(rep.matrix[0][2], r_xz, epsilon = 1e-9);
        assert_abs_diff_eq!(rep.matrix[1][2], r_yz, epsilon = 1e-9);
    }

    #[test]
    fn constant_column_correlates_zero() {
        let rep = correlation_report(&numeric_dataset(&[vec![1.0, 2.0, 3.0], vec![5.0, 5.0, 5.0]]), 0.5).unwrap();
        assert_eq!(rep.constant_features, vec![1]);
        assert_eq!(rep.matrix[0][1], 0.0);
        assert_eq!(rep.matrix[1][1], 1.0);
    }

    #[test]
    fn edges_shrink_with_threshold() {
        let cols = vec![
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            vec![1.0, 2.5, 2.0, 4.5, 5.0, 5.5],
            vec![2.0, 1.0, 3.0, 5.0, 4.0, 6.0],
            vec![6.0, 1.0, 5.0, 2.0, 4.0, 3.0],
        ];
        let rep = correlation_report(&numeric_dataset(&cols), 0.0).unwrap();
        let mut prev = rep.positive_edges_at(-1.0).len();
        for tau in [-0.5, 0.0, 0.3, 0.6, 0.9, 1.0] {
            let now = rep.positive_edges_at(tau);
            assert!(now.len() <= prev);
            assert!(now.iter().all(|e| e.r >= tau));
            prev = now.len();
        }
        for a in 0..4 {
            for b in 0..4 {
                assert_eq!(rep.matrix[a][b], rep.matrix[b][a]);
            }
        }
        let mut sorted = rep.feature_order.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
    }

    #[test]
    fn needs_three_records() {
        assert!(correlation_report(&numeric_dataset(&[vec![1.0, 2.0]]), 0.5).is_err());
    }
}
