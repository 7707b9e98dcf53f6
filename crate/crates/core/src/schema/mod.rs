//! Feature schema, survey records and the encoding rules every other module
//! relies on.
//!
//! Every feature encodes to the unit interval so that convex combinations of
//! encoded features stay in `[0, 1]`.

mod io;

pub use io::{read_incidents_csv, read_survey_csv, write_incidents_csv, write_survey_csv};

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kind and legal range of one survey feature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FeatureKind {
    Binary,
    /// Levels `0..levels`.
    Ordinal { levels: u32 },
    BoundedNumeric { lo: f64, hi: f64 },
}

impl FeatureKind {
    fn check(&self) -> Result<()> {
        match *self {
            FeatureKind::Binary => Ok(()),
            FeatureKind::Ordinal { levels } if levels >= 2 => Ok(()),
            FeatureKind::Ordinal { levels } => Err(Error::InvalidSchema(format!(
                "ordinal arity must be >= 2, got {levels}"
            ))),
            FeatureKind::BoundedNumeric { lo, hi } if lo.is_finite() && hi.is_finite() && lo < hi => {
                Ok(())
            }
            FeatureKind::BoundedNumeric { lo, hi } => Err(Error::InvalidSchema(format!(
                "bounded numeric needs finite lo < hi, got [{lo}, {hi}]"
            ))),
        }
    }

    /// Whether `value` is a legal raw value for this kind.
    pub fn accepts(&self, value: f64) -> bool {
        match *self {
            FeatureKind::Binary => value == 0.0 || value == 1.0,
            FeatureKind::Ordinal { levels } => {
                value.fract() == 0.0 && value >= 0.0 && value <= f64::from(levels - 1)
            }
            FeatureKind::BoundedNumeric { lo, hi } => value.is_finite() && value >= lo && value <= hi,
        }
    }

    /// Maps a legal raw value onto `[0, 1]`. Caller checks legality.
    pub fn encode(&self, value: f64) -> f64 {
        match *self {
            FeatureKind::Binary => value,
            FeatureKind::Ordinal { levels } => value / f64::from(levels - 1),
            FeatureKind::BoundedNumeric { lo, hi } => (value - lo) / (hi - lo),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawFeatureDef", into = "RawFeatureDef")]
pub struct FeatureDef {
    pub id: String,
    pub kind: FeatureKind,
    pub display_name: String,
}

impl FeatureDef {
    pub fn new(id: impl Into<String>, kind: FeatureKind, display_name: impl Into<String>) -> Self {
        FeatureDef { id: id.into(), kind, display_name: display_name.into() }
    }
}

/// On-disk shape of a feature definition: `{id, kind, params, display_name}`.
#[derive(Serialize, Deserialize)]
struct RawFeatureDef {
    id: String,
    kind: String,
    #[serde(default)]
    params: BTreeMap<String, f64>,
    #[serde(default)]
    display_name: String,
}

impl TryFrom<RawFeatureDef> for FeatureDef {
    type Error = Error;

    fn try_from(raw: RawFeatureDef) -> Result<Self> {
        let param = |name: &str| {
            raw.params.get(name).copied().ok_or_else(|| {
                Error::InvalidSchema(format!("feature `{}` is missing param `{name}`", raw.id))
            })
        };
        let kind = match raw.kind.as_str() {
            "binary" => FeatureKind::Binary,
            "ordinal" => {
                let levels = param("levels")?;
                if levels.fract() != 0.0 || levels < 0.0 || levels > f64::from(u32::MAX) {
                    return Err(Error::InvalidSchema(format!(
                        "feature `{}` has non-integer levels {levels}",
                        raw.id
                    )));
                }
                FeatureKind::Ordinal { levels: levels as u32 }
            }
            "bounded_numeric" => FeatureKind::BoundedNumeric { lo: param("lo")?, hi: param("hi")? },
            other => {
                return Err(Error::InvalidSchema(format!(
                    "feature `{}` has unknown kind `{other}`",
                    raw.id
                )))
            }
        };
        kind.check()?;
        Ok(FeatureDef { id: raw.id, kind, display_name: raw.display_name })
    }
}

impl From<FeatureDef> for RawFeatureDef {
    fn from(def: FeatureDef) -> Self {
        let mut params = BTreeMap::new();
        let kind = match def.kind {
            FeatureKind::Binary => "binary",
            FeatureKind::Ordinal { levels } => {
                params.insert("levels".to_string(), f64::from(levels));
                "ordinal"
            }
            FeatureKind::BoundedNumeric { lo, hi } => {
                params.insert("lo".to_string(), lo);
                params.insert("hi".to_string(), hi);
                "bounded_numeric"
            }
        };
        RawFeatureDef { id: def.id, kind: kind.to_string(), params, display_name: def.display_name }
    }
}

/// Ordered feature list shared by records, models and analytics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSchema")]
pub struct FeatureSchema {
    pub version: u32,
    features: Vec<FeatureDef>,
}

#[derive(Deserialize)]
struct RawSchema {
    version: u32,
    features: Vec<FeatureDef>,
}

impl TryFrom<RawSchema> for FeatureSchema {
    type Error = Error;

    fn try_from(raw: RawSchema) -> Result<Self> {
        FeatureSchema::new(raw.version, raw.features)
    }
}

impl FeatureSchema {
    pub fn new(version: u32, features: Vec<FeatureDef>) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::InvalidSchema("schema needs at least one feature".into()));
        }
        let mut seen = HashSet::new();
        for f in &features {
            if !seen.insert(f.id.as_str()) {
                return Err(Error::InvalidSchema(format!("duplicate feature id `{}`", f.id)));
            }
            f.kind.check()?;
        }
        Ok(FeatureSchema { version, features })
    }

    /// The shipped 32-feature placeholder schema: 16 binary, 12 ordinal(4) and
    /// 4 bounded-numeric features across the education, protection, health and
    /// nutrition verticals. Field deployments load their own schema file.
    pub fn default_schema() -> Self {
        use FeatureKind::*;
        const ORD4: FeatureKind = Ordinal { levels: 4 };
        let defs = [
            ("edu_enrolled_school", Binary, "Currently enrolled in school"),
            ("edu_dropped_out", Binary, "Dropped out in the last year"),
            ("edu_literate", Binary, "Can read and write"),
            ("edu_vocational_training", Binary, "Attends vocational training"),
            ("edu_attendance_level", ORD4, "School attendance (0 never .. 3 regular)"),
            ("edu_grade_gap", ORD4, "Grades behind age-appropriate level"),
            ("edu_aspiration", ORD4, "Stated education aspiration"),
            ("edu_school_distance_km", BoundedNumeric { lo: 0.0, hi: 30.0 }, "Distance to school (km)"),
            ("prot_birth_registered", Binary, "Birth is registered"),
            ("prot_parent_migrated", Binary, "A parent migrated for work"),
            ("prot_child_marriage_risk", Binary, "Marriage discussed before 18"),
            ("prot_works_outside_home", Binary, "Works outside the home"),
            ("prot_family_conflict", ORD4, "Household conflict level"),
            ("prot_peer_support", ORD4, "Peer support network strength"),
            ("prot_mobile_access", ORD4, "Access to a mobile phone"),
            ("prot_age_years", BoundedNumeric { lo: 10.0, hi: 19.0 }, "Age in years"),
            ("health_immunized", Binary, "Immunization complete"),
            ("health_chronic_illness", Binary, "Chronic illness in household"),
            ("health_menstrual_hygiene", Binary, "Access to menstrual hygiene products"),
            ("health_safe_water", Binary, "Safe drinking water at home"),
            ("health_clinic_access", ORD4, "Ease of reaching a clinic"),
            ("health_self_rated", ORD4, "Self-rated health"),
            ("health_sanitation", ORD4, "Household sanitation level"),
            ("health_household_size", BoundedNumeric { lo: 1.0, hi: 12.0 }, "Household size"),
            ("nut_midday_meal", Binary, "Receives school midday meal"),
            ("nut_anaemia", Binary, "Diagnosed anaemia"),
            ("nut_ration_card", Binary, "Household holds a ration card"),
            ("nut_supplement", Binary, "Receives nutrition supplement"),
            ("nut_meals_per_day", ORD4, "Meals per day band"),
            ("nut_diet_diversity", ORD4, "Diet diversity band"),
            ("nut_food_security", ORD4, "Household food security band"),
            ("nut_household_income", BoundedNumeric { lo: 0.0, hi: 99.0 }, "Monthly household income (hundreds)"),
        ];
        let features = defs.into_iter().map(|(id, kind, name)| FeatureDef::new(id, kind, name)).collect();
        FeatureSchema::new(1, features).expect("default schema is valid")
    }

    pub fn features(&self) -> &[FeatureDef] {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.features.iter().position(|f| f.id == id)
    }

    pub fn feature_ids(&self) -> Vec<String> {
        self.features.iter().map(|f| f.id.clone()).collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidSchema(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Encodes a record onto the unit interval, feature by feature.
    pub fn normalize(&self, record: &SurveyRecord) -> Result<Vec<f64>> {
        normalize(record, self)
    }
}

/// One subject's raw survey answers, aligned with schema order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyRecord {
    pub subject_id: String,
    pub locality_id: String,
    pub values: Vec<f64>,
    pub collected_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Trafficked,
    ConfirmedSafe,
}

impl Outcome {
    /// Training target: 1 for trafficked, 0 for confirmed safe.
    pub fn target(self) -> f64 {
        match self {
            Outcome::Trafficked => 1.0,
            Outcome::ConfirmedSafe => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Trafficked => "trafficked",
            Outcome::ConfirmedSafe => "confirmed-safe",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "trafficked" => Ok(Outcome::Trafficked),
            "confirmed-safe" | "confirmed_safe" => Ok(Outcome::ConfirmedSafe),
            other => Err(Error::Parse(format!("unknown outcome `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncidentLabel {
    pub subject_id: String,
    pub outcome: Outcome,
    pub observed_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub records: Vec<SurveyRecord>,
    #[serde(default)]
    pub labels: Vec<IncidentLabel>,
}

impl Dataset {
    pub fn new(schema: FeatureSchema, records: Vec<SurveyRecord>) -> Self {
        Dataset { schema, records, labels: Vec::new() }
    }

    /// Copy of this dataset keeping only records that pass validation.
    pub fn valid_only(&self) -> Dataset {
        let records = self
            .records
            .iter()
            .filter(|r| record_violations(r, &self.schema).is_none())
            .cloned()
            .collect();
        Dataset { schema: self.schema.clone(), records, labels: self.labels.clone() }
    }

    /// Normalized records as rows. Fails on the first invalid record.
    pub fn normalized_rows(&self) -> Result<Vec<Vec<f64>>> {
        self.records.iter().map(|r| normalize(r, &self.schema)).collect()
    }
}

/// Encodes `record` onto `[0,1]^d`.
pub fn normalize(record: &SurveyRecord, schema: &FeatureSchema) -> Result<Vec<f64>> {
    if record.values.len() != schema.len() {
        return Err(Error::SchemaMismatch { expected: schema.len(), got: record.values.len() });
    }
    schema
        .features
        .iter()
        .zip(&record.values)
        .map(|(def, &v)| {
            if def.kind.accepts(v) {
                Ok(def.kind.encode(v))
            } else {
                Err(Error::RangeViolation { feature: def.id.clone(), value: v })
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureViolation {
    pub feature: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordViolation {
    pub record_index: usize,
    pub subject_id: String,
    /// Set when the record has the wrong number of values.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub length_mismatch: Option<usize>,
    pub features: Vec<FeatureViolation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "issue", rename_all = "snake_case")]
pub enum LabelIssue {
    UnknownSubject { label_index: usize, subject_id: String },
    Duplicate { label_index: usize, subject_id: String, observed_at: u64 },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub records: Vec<RecordViolation>,
    pub labels: Vec<LabelIssue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty() && self.labels.is_empty()
    }

    pub fn flagged_record_count(&self) -> usize {
        self.records.len()
    }
}

fn record_violations(record: &SurveyRecord, schema: &FeatureSchema) -> Option<(Option<usize>, Vec<FeatureViolation>)> {
    if record.values.len() != schema.len() {
        return Some((Some(record.values.len()), Vec::new()));
    }
    let bad: Vec<_> = schema
        .features
        .iter()
        .zip(&record.values)
        .filter(|(def, &v)| !def.kind.accepts(v))
        .map(|(def, &v)| FeatureViolation { feature: def.id.clone(), value: v })
        .collect();
    (!bad.is_empty()).then_some((None, bad))
}

/// Lists every schema violation in `d`. Never aborts.
pub fn validate_dataset(d: &Dataset) -> ValidationReport {
    let records = d
        .records
        .iter()
        .enumerate()
        .filter_map(|(i, r)| {
            record_violations(r, &d.schema).map(|(length_mismatch, features)| RecordViolation {
                record_index: i,
                subject_id: r.subject_id.clone(),
                length_mismatch,
                features,
            })
        })
        .collect();

    let subjects: BTreeSet<&str> = d.records.iter().map(|r| r.subject_id.as_str()).collect();
    let mut seen = BTreeSet::new();
    let mut labels = Vec::new();
    for (i, l) in d.labels.iter().enumerate() {
        if !subjects.contains(l.subject_id.as_str()) {
            labels.push(LabelIssue::UnknownSubject { label_index: i, subject_id: l.subject_id.clone() });
        }
        if !seen.insert((l.subject_id.as_str(), l.observed_at)) {
            labels.push(LabelIssue::Duplicate {
                label_index: i,
                subject_id: l.subject_id.clone(),
                observed_at: l.observed_at,
            });
        }
    }
    ValidationReport { records, labels }
}
