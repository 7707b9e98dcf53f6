//! Simple-matching similarity between survey records.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::schema::{Dataset, FeatureKind, FeatureSchema, SurveyRecord};

/// Histogram bins of width 0.05 over `[0, 1]`; the last bin includes 1.0.
pub const SIMILARITY_BINS: usize = 20;

const NUMERIC_TOL: f64 = 1e-9;

fn feature_matches(kind: &FeatureKind, a: f64, b: f64) -> bool {
    match kind {
        FeatureKind::BoundedNumeric { .. } => (kind.encode(a) - kind.encode(b)).abs() <= NUMERIC_TOL,
        _ => a == b,
    }
}

/// Number of features on which `a` and `b` agree.
pub fn match_count(a: &SurveyRecord, b: &SurveyRecord, schema: &FeatureSchema) -> Result<usize> {
    for r in [a, b] {
        if r.values.len() != schema.len() {
            return Err(Error::SchemaMismatch { expected: schema.len(), got: r.values.len() });
        }
    }
    Ok(schema
        .features()
        .iter()
        .zip(a.values.iter().zip(&b.values))
        .filter(|(def, (x, y))| feature_matches(&def.kind, **x, **y))
        .count())
}

/// Fraction of features with equal raw values (numeric ones compared after
/// normalization).
pub fn similarity(a: &SurveyRecord, b: &SurveyRecord, schema: &FeatureSchema) -> Result<f64> {
    Ok(match_count(a, b, schema)? as f64 / schema.len() as f64)
}

/// All-pairs similarity summary of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityStats {
    pub n_records: usize,
    pub n_features: usize,
    /// `match_counts[m]` = number of pairs agreeing on exactly `m` features.
    pub match_counts: Vec<u64>,
    pub pair_histogram: Vec<u64>,
    pub duplicate_partner_fraction: f64,
}

impl SimilarityStats {
    pub fn total_pairs(&self) -> u64 {
        self.match_counts.iter().sum()
    }

    /// Fraction of pairs with similarity strictly below `tau`.
    pub fn low_similarity_pair_fraction(&self, tau: f64) -> f64 {
        let total = self.total_pairs();
        if total == 0 {
            return 0.0;
        }
        let low: u64 = self
            .match_counts
            .iter()
            .enumerate()
            .filter(|(m, _)| (*m as f64) / (self.n_features as f64) < tau)
            .map(|(_, c)| c)
            .sum();
        low as f64 / total as f64
    }

    /// `(bin_low, bin_high, count)` rows.
    pub fn bins(&self) -> Vec<(f64, f64, u64)> {
        self.pair_histogram
            .iter()
            .enumerate()
            .map(|(i, &c)| (i as f64 / SIMILARITY_BINS as f64, (i + 1) as f64 / SIMILARITY_BINS as f64, c))
            .collect()
    }
}

fn bin_of(matches: usize, d: usize) -> usize {
    (matches * SIMILARITY_BINS / d).min(SIMILARITY_BINS - 1)
}

pub fn similarity_stats(d: &Dataset) -> Result<SimilarityStats> {
    let n = d.records.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("similarity needs >= 2 records, got {n}")));
    }
    let dim = d.schema.len();
    for r in &d.records {
        if r.values.len() != dim {
            return Err(Error::SchemaMismatch { expected: dim, got: r.values.len() });
        }
    }
    let kinds: Vec<FeatureKind> = d.schema.features().iter().map(|f| f.kind).collect();
    let mut match_counts = vec![0u64; dim + 1];
    let mut has_twin = vec![false; n];
    for i in 0..n {
        let a = &d.records[i].values;
        for j in (i + 1)..n {
            let b = &d.records[j].values;
            let m = kinds.iter().zip(a.iter().zip(b)).filter(|(k, (x, y))| feature_matches(k, **x, **y)).count();
            match_counts[m] += 1;
            if m == dim {
                has_twin[i] = true;
                has_twin[j] = true;
            }
        }
    }
    let mut pair_histogram = vec![0u64; SIMILARITY_BINS];
    for (m, &c) in match_counts.iter().enumerate() {
        pair_histogram[bin_of(m, dim)] += c;
    }
    let duplicate_partner_fraction = has_twin.iter().filter(|&&t| t).count() as f64 / n as f64;
    Ok(SimilarityStats { n_records: n, n_features: dim, match_counts, pair_histogram, duplicate_partner_fraction })
}
