//! Seeded synthetic survey cohorts.
//!
//! Records are drawn from a mixture of archetype profiles with independent
//! per-feature flips. A fraction of records are exact copies of earlier
//! records of the same archetype, and an optional block of records with
//! out-of-range ordinal answers is appended at the end.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analytics::{matrix_from_rows, min_components_for, pca, similarity_stats, DEFAULT_EVR_TARGET};
use crate::error::{Error, Result};
use crate::schema::{validate_dataset, Dataset, FeatureKind, FeatureSchema, SurveyRecord};

const CALIBRATED: &str = include_str!("../data/calibrated_cohort.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NumericMode {
    /// Integer grid for integral bounds, otherwise 101 evenly spaced points.
    #[default]
    Discrete,
    Continuous,
}

fn default_localities() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub n_records: usize,
    pub seed: u64,
    pub archetype_count: usize,
    pub archetype_weights: Vec<f64>,
    /// Feature ids on which each archetype departs from the base profile.
    /// When absent, every feature departs with `archetype_divergence`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub archetype_spans: Option<Vec<Vec<String>>>,
    #[serde(default)]
    pub archetype_divergence: f64,
    pub flip_probability: f64,
    #[serde(default)]
    pub flip_overrides: BTreeMap<String, f64>,
    pub duplicate_boost: f64,
    #[serde(default)]
    pub invalid_block_size: usize,
    #[serde(default)]
    pub numeric_mode: NumericMode,
    #[serde(default = "default_localities")]
    pub localities: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<FeatureSchema>,
}

impl GenConfig {
    /// The committed calibration for the default schema, n = 1000.
    pub fn calibrated() -> Self {
        serde_json::from_str(CALIBRATED).expect("calibrated cohort config parses")
    }

    /// Parses a config object; fields it omits take their calibrated values.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::BadConfig(e.to_string()))?;
        Self::from_overrides(value)
    }

    /// Applies the top-level fields of `overrides` to [`GenConfig::calibrated`].
    pub fn from_overrides(overrides: serde_json::Value) -> Result<Self> {
        let serde_json::Value::Object(fields) = overrides else {
            return Err(Error::BadConfig("cohort config must be a JSON object".into()));
        };
        let mut base = match serde_json::from_str::<serde_json::Value>(CALIBRATED) {
            Ok(serde_json::Value::Object(base)) => base,
            _ => unreachable!("calibrated cohort config is an object"),
        };
        base.extend(fields);
        serde_path_to_error::deserialize(serde_json::Value::Object(base)).map_err(|e| Error::BadConfig(format!("{}: {}", e.path(), e.inner())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn schema(&self) -> FeatureSchema {
        self.schema.clone().unwrap_or_else(FeatureSchema::default_schema)
    }

    fn flip_probabilities(&self, schema: &FeatureSchema) -> Vec<f64> {
        schema
            .features()
            .iter()
            .map(|f| self.flip_overrides.get(&f.id).copied().unwrap_or(self.flip_probability))
            .collect()
    }

    fn validate(&self, schema: &FeatureSchema) -> Result<()> {
        let bad = |msg: String| Err(Error::BadConfig(msg));
        if self.n_records == 0 {
            return bad("n_records must be positive".into());
        }
        if self.archetype_count == 0 || self.archetype_weights.len() != self.archetype_count {
            return bad(format!(
                "archetype_weights has {} entries for archetype_count {}",
                self.archetype_weights.len(),
                self.archetype_count
            ));
        }
        if self.archetype_weights.iter().any(|w| !w.is_finite() || *w < 0.0)
            || (self.archetype_weights.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad("archetype_weights must be non-negative and sum to 1".into());
        }
        let probability = |p: f64| (0.0..=1.0).contains(&p);
        if !probability(self.flip_probability)
            || !probability(self.duplicate_boost)
            || !probability(self.archetype_divergence)
            || !self.flip_overrides.values().all(|p| probability(*p))
        {
            return bad("probabilities must lie in [0, 1]".into());
        }
        if let Some(id) = self.flip_overrides.keys().find(|id| schema.index_of(id).is_none()) {
            return bad(format!("flip override for unknown feature `{id}`"));
        }
        if let Some(spans) = &self.archetype_spans {
            if spans.len() != self.archetype_count {
                return bad(format!("{} archetype spans for {} archetypes", spans.len(), self.archetype_count));
            }
            if let Some(id) = spans.iter().flatten().find(|id| schema.index_of(id).is_none()) {
                return bad(format!("archetype span names unknown feature `{id}`"));
            }
        }
        if self.localities == 0 {
            return bad("localities must be positive".into());
        }
        if self.invalid_block_size > 0
            && !schema.features().iter().any(|f| matches!(f.kind, FeatureKind::Ordinal { .. }))
        {
            return bad("an invalid block needs at least one ordinal feature".into());
        }
        Ok(())
    }
}

struct Sampler {
    rng: ChaCha8Rng,
    mode: NumericMode,
}

impl Sampler {
    /// (step, point count) of the discrete grid over `[lo, hi]`.
    fn grid(lo: f64, hi: f64) -> (f64, usize) {
        if lo.fract() == 0.0 && hi.fract() == 0.0 && hi - lo <= 1000.0 {
            (1.0, (hi - lo) as usize + 1)
        } else {
            ((hi - lo) / 100.0, 101)
        }
    }

    fn fresh(&mut self, kind: FeatureKind) -> f64 {
        match kind {
            FeatureKind::Binary => f64::from(self.rng.random_range(0..2u8)),
            FeatureKind::Ordinal { levels } => f64::from(self.rng.random_range(0..levels)),
            FeatureKind::BoundedNumeric { lo, hi } => match self.mode {
                NumericMode::Continuous => self.rng.random_range(lo..=hi),
                NumericMode::Discrete => {
                    let (step, count) = Self::grid(lo, hi);
                    (lo + step * self.rng.random_range(0..count) as f64).min(hi)
                }
            },
        }
    }

    /// A legal value different from `v`.
    fn deviate(&mut self, kind: FeatureKind, v: f64) -> f64 {
        match kind {
            FeatureKind::Binary => 1.0 - v,
            FeatureKind::Ordinal { levels } => {
                let shift = self.rng.random_range(1..levels);
                f64::from((v as u32 + shift) % levels)
            }
            FeatureKind::BoundedNumeric { lo, hi } => match self.mode {
                NumericMode::Continuous => self.rng.random_range(lo..=hi),
                NumericMode::Discrete => {
                    let (step, count) = Self::grid(lo, hi);
                    let current = ((v - lo) / step).round() as usize;
                    let shift = self.rng.random_range(1..count);
                    (lo + step * ((current + shift) % count) as f64).min(hi)
                }
            },
        }
    }

    fn pick(&mut self, weights: &[f64]) -> usize {
        let u: f64 = self.rng.random();
        let mut acc = 0.0;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
    }
}

/// Draws a dataset from `config`. Deterministic per seed.
pub fn generate(config: &GenConfig) -> Result<Dataset> {
    let schema = config.schema();
    config.validate(&schema)?;
    let flips = config.flip_probabilities(&schema);
    let mut s = Sampler { rng: ChaCha8Rng::seed_from_u64(config.seed), mode: config.numeric_mode };
    let d = schema.len();
    let kinds: Vec<FeatureKind> = schema.features().iter().map(|f| f.kind).collect();
    let base: Vec<f64> = kinds.iter().map(|&k| s.fresh(k)).collect();
    let mut archetypes = Vec::with_capacity(config.archetype_count);
    for a in 0..config.archetype_count {
        let mut profile = base.clone();
        match &config.archetype_spans {
            Some(spans) => {
                for id in &spans[a] {
                    let j = schema.index_of(id).expect("validated");
                    profile[j] = s.deviate(kinds[j], profile[j]);
                }
            }
            None => {
                for j in 0..d {
                    if s.rng.random::<f64>() < config.archetype_divergence {
                        profile[j] = s.deviate(kinds[j], profile[j]);
                    }
                }
            }
        }
        archetypes.push(profile);
    }

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); config.archetype_count];
    let mut records: Vec<SurveyRecord> = Vec::with_capacity(config.n_records + config.invalid_block_size);
    let draw = |s: &mut Sampler, archetype: &[f64]| -> Vec<f64> {
        let mut values = archetype.to_vec();
        for j in 0..d {
            if s.rng.random::<f64>() < flips[j] {
                values[j] = s.deviate(kinds[j], values[j]);
            }
        }
        values
    };

    for i in 0..config.n_records {
        let a = s.pick(&config.archetype_weights);
        let copy_of = if !members[a].is_empty() && s.rng.random::<f64>() < config.duplicate_boost {
            Some(members[a][s.rng.random_range(0..members[a].len())])
        } else {
            None
        };
        let values = match copy_of {
            Some(src) => records[src].values.clone(),
            None => draw(&mut s, &archetypes[a]),
        };
        members[a].push(i);
        let locality = s.rng.random_range(0..config.localities);
        records.push(SurveyRecord {
            subject_id: format!("S{i:05}"),
            locality_id: format!("L{locality:02}"),
            values,
            collected_at: i as u64,
        });
    }

    let ordinal: Vec<usize> = (0..d).filter(|&j| matches!(kinds[j], FeatureKind::Ordinal { .. })).collect();
    for b in 0..config.invalid_block_size {
        let a = s.pick(&config.archetype_weights);
        let mut values = draw(&mut s, &archetypes[a]);
        let corrupt = 1 + s.rng.random_range(0..ordinal.len().min(2));
        for _ in 0..corrupt {
            let j = ordinal[s.rng.random_range(0..ordinal.len())];
            if let FeatureKind::Ordinal { levels } = kinds[j] {
                values[j] = f64::from(levels + s.rng.random_range(0..4u32));
            }
        }
        let i = config.n_records + b;
        let locality = s.rng.random_range(0..config.localities);
        records.push(SurveyRecord {
            subject_id: format!("S{i:05}"),
            locality_id: format!("L{locality:02}"),
            values,
            collected_at: i as u64,
        });
    }
    Ok(Dataset::new(schema, records))
}

/// The four structural anchors of a survey dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n_valid: usize,
    pub n_invalid: usize,
    pub duplicate_partner_fraction: f64,
    pub low_similarity_pair_fraction_70: f64,
    /// `None` when the valid records carry no variance.
    pub first_pc_evr: Option<f64>,
    pub components_for_85: Option<usize>,
}

impl CalibrationReport {
    pub fn is_degenerate(&self) -> bool {
        self.first_pc_evr.is_none()
    }
}

/// Measures the anchors on the valid part of `d`.
pub fn measure(d: &Dataset) -> Result<CalibrationReport> {
    let report = validate_dataset(d);
    let valid = d.valid_only();
    let n_valid = valid.records.len();
    if n_valid < 2 {
        return Err(Error::InsufficientData(format!("measure needs >= 2 valid records, got {n_valid}")));
    }
    let sim = similarity_stats(&valid)?;
    let p = pca(&matrix_from_rows(&valid.normalized_rows()?)?)?;
    let (first_pc_evr, components_for_85) = if p.is_degenerate() {
        (None, None)
    } else {
        (Some(p.explained_variance_ratio[0]), Some(min_components_for(DEFAULT_EVR_TARGET, &p)))
    };
    Ok(CalibrationReport {
        n_valid,
        n_invalid: report.flagged_record_count(),
        duplicate_partner_fraction: sim.duplicate_partner_fraction,
        low_similarity_pair_fraction_70: sim.low_similarity_pair_fraction(0.70),
        first_pc_evr,
        components_for_85,
    })
}
