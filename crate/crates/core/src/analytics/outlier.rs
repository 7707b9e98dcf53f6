use serde::{Deserialize, Serialize};

/// Fewer same-locality records than this gives no verdict.
pub const MIN_LOCALITY_RECORDS: usize = 5;
pub const DEVIATION_THRESHOLD: f64 = 3.0;
const STDDEV_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDeviation {
    pub feature: String,
    pub index: usize,
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum OutlierCheck {
    InsufficientContext { available: usize },
    Checked { flags: Vec<FeatureDeviation> },
}

impl OutlierCheck {
    pub fn flags(&self) -> &[FeatureDeviation] {
        match self {
            OutlierCheck::Checked { flags } => flags,
            OutlierCheck::InsufficientContext { .. } => &[],
        }
    }
}

/// Flags features where `record` sits more than three locality standard
/// deviations (sample stddev, floored at 1e-6) from the locality mean.
///
/// All inputs are normalized vectors. Flags come sorted by deviation,
/// largest first, ties by feature index.
pub fn locality_outlier_check(record: &[f64], locality: &[Vec<f64>], feature_ids: &[String]) -> OutlierCheck {
    let m = locality.len();
    if m < MIN_LOCALITY_RECORDS {
        return OutlierCheck::InsufficientContext { available: m };
    }
    let mut flags = Vec::new();
    for (j, &value) in record.iter().enumerate() {
        let mean = locality.iter().map(|r| r[j]).sum::<f64>() / m as f64;
        let var = locality.iter().map(|r| (r[j] - mean) * (r[j] - mean)).sum::<f64>() / (m - 1) as f64;
        let sd = var.sqrt().max(STDDEV_FLOOR);
        let deviation = (value - mean).abs() / sd;
        if deviation > DEVIATION_THRESHOLD {
            flags.push(FeatureDeviation { feature: feature_ids[j].clone(), index: j, deviation });
        }
    }
    flags.sort_by(|a, b| b.deviation.total_cmp(&a.deviation).then(a.index.cmp(&b.index)));
    OutlierCheck::Checked { flags }
}
