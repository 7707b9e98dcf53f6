//! Per-agent state: subject registry, prediction cache, retraining on every
//! reported incident, prediction diffing and the alert log.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};

use crate::analytics::{locality_outlier_check, similarity, FeatureDeviation, OutlierCheck};
use crate::error::{Error, Result};
use crate::schema::{normalize, Dataset, FeatureSchema, IncidentLabel, SurveyRecord};
use crate::scoring::{
    retrain, score_blended, BlendPolicy, HeuristicModel, LabeledExample, LearnedModel, ModelFile, Prediction,
    TrainConfig,
};

pub const SNAPSHOT_FORMAT: &str = "sentinel-agent-snapshot";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AlertKind {
    EnteredDangerZone,
    LocalityOutlier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AlertDetail {
    /// Cached score before and after the retrain that crossed the threshold.
    Score { before: f64, after: f64 },
    Deviations { features: Vec<FeatureDeviation> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertEvent {
    pub alert_id: u64,
    pub kind: AlertKind,
    pub subject_id: String,
    pub detail: AlertDetail,
    pub model_version: u64,
    /// Logical time of the triggering record or label.
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnrollStatus {
    Inserted,
    Updated,
    /// Same subject and `collected_at` as the registry entry.
    Unchanged,
    /// Older than the registry entry; ignored.
    Stale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrollOutcome {
    pub status: EnrollStatus,
    pub prediction: Prediction,
    pub alert: Option<AlertEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncidentOutcome {
    pub retrained: bool,
    pub model_version: u64,
    pub alerts: Vec<AlertEvent>,
    /// Subjects that moved from vulnerable to safe (logged, not alerted).
    pub downgrades: Vec<String>,
    /// The retrain saw only one outcome class.
    pub single_class: bool,
}

fn default_retrain_every() -> usize {
    1
}

/// Everything an agent device knows. Mutations are not thread-safe; callers
/// serialize writers per agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentState {
    agent_id: String,
    schema: FeatureSchema,
    heuristic: HeuristicModel,
    learned: LearnedModel,
    policy: BlendPolicy,
    train: TrainConfig,
    /// Retrain after this many new labels; 1 retrains on every incident.
    #[serde(default = "default_retrain_every")]
    retrain_every: usize,
    #[serde(default)]
    pending_labels: usize,
    registry: BTreeMap<String, SurveyRecord>,
    labels: Vec<IncidentLabel>,
    predictions: BTreeMap<String, Prediction>,
    alerts: Vec<AlertEvent>,
}

impl AgentState {
    pub fn new(agent_id: impl Into<String>, schema: FeatureSchema, models: ModelFile, train: TrainConfig) -> Result<Self> {
        let d = schema.len();
        for got in [models.heuristic.dim(), models.learned.dim()] {
            if got != d {
                return Err(Error::DimensionMismatch { expected: d, got });
            }
        }
        Ok(AgentState {
            agent_id: agent_id.into(),
            schema,
            heuristic: models.heuristic,
            learned: models.learned,
            policy: models.policy,
            train,
            retrain_every: 1,
            pending_labels: 0,
            registry: BTreeMap::new(),
            labels: Vec::new(),
            predictions: BTreeMap::new(),
            alerts: Vec::new(),
        })
    }

    /// Default models and training settings for `schema`.
    pub fn with_defaults(agent_id: impl Into<String>, schema: FeatureSchema) -> Self {
        let models = ModelFile::default_for(schema.len());
        Self::new(agent_id, schema, models, TrainConfig::default()).expect("default models match schema")
    }

    /// Throttles retraining to once per `n` labels (`n >= 1`).
    pub fn set_retrain_every(&mut self, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::BadConfig("retrain_every must be positive".into()));
        }
        self.retrain_every = n;
        Ok(())
    }

    pub fn agent_id(&self) -> &str {
        &self.agent_id
    }
    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }
    pub fn heuristic(&self) -> &HeuristicModel {
        &self.heuristic
    }
    pub fn learned(&self) -> &LearnedModel {
        &self.learned
    }
    pub fn policy(&self) -> &BlendPolicy {
        &self.policy
    }
    pub fn train_config(&self) -> &TrainConfig {
        &self.train
    }
    pub fn registry(&self) -> &BTreeMap<String, SurveyRecord> {
        &self.registry
    }
    pub fn labels(&self) -> &[IncidentLabel] {
        &self.labels
    }
    pub fn predictions(&self) -> &BTreeMap<String, Prediction> {
        &self.predictions
    }
    pub fn alerts(&self) -> &[AlertEvent] {
        &self.alerts
    }

    pub fn prediction(&self, subject_id: &str) -> Result<&Prediction> {
        self.predictions.get(subject_id).ok_or_else(|| Error::UnknownSubject(subject_id.to_string()))
    }

    /// Alerts with `alert_id > cursor`, in id order.
    pub fn alerts_since(&self, cursor: u64) -> &[AlertEvent] {
        let start = self.alerts.partition_point(|a| a.alert_id <= cursor);
        &self.alerts[start..]
    }

    /// The alert log, one JSON object per line.
    pub fn alerts_jsonl(&self) -> String {
        self.alerts.iter().map(|a| serde_json::to_string(a).expect("alerts serialize") + "\n").collect()
    }

    /// Registry records (subject-id order) as a dataset carrying the labels.
    pub fn registry_dataset(&self) -> Dataset {
        Dataset { schema: self.schema.clone(), records: self.registry.values().cloned().collect(), labels: self.labels.clone() }
    }

    /// Scores `record` with the current models without touching state.
    pub fn score(&self, record: &SurveyRecord) -> Result<Prediction> {
        let x = normalize(record, &self.schema)?;
        score_blended(&record.subject_id, &x, &self.heuristic, &self.learned, &self.policy)
    }

    fn push_alert(&mut self, kind: AlertKind, subject_id: &str, detail: AlertDetail, timestamp: u64) -> AlertEvent {
        let alert = AlertEvent {
            alert_id: self.alerts.last().map_or(1, |a| a.alert_id + 1),
            kind,
            subject_id: subject_id.to_string(),
            detail,
            model_version: self.learned.version,
            timestamp,
        };
        self.alerts.push(alert.clone());
        alert
    }

    /// Adds or refreshes a subject, caches its prediction and checks it
    /// against the rest of its locality.
    pub fn enroll(&mut self, record: SurveyRecord) -> Result<EnrollOutcome> {
        let x = normalize(&record, &self.schema)?;
        let status = match self.registry.get(&record.subject_id) {
            None => EnrollStatus::Inserted,
            Some(prev) if record.collected_at < prev.collected_at => EnrollStatus::Stale,
            Some(prev) if record.collected_at == prev.collected_at => {
                if *prev != record {
                    return Err(Error::ConflictingRecord {
                        subject_id: record.subject_id,
                        collected_at: record.collected_at,
                    });
                }
                EnrollStatus::Unchanged
            }
            Some(_) => EnrollStatus::Updated,
        };
        if matches!(status, EnrollStatus::Stale | EnrollStatus::Unchanged) {
            let prediction = self.predictions[&record.subject_id].clone();
            return Ok(EnrollOutcome { status, prediction, alert: None });
        }

        let prediction = score_blended(&record.subject_id, &x, &self.heuristic, &self.learned, &self.policy)?;
        let locality: Vec<Vec<f64>> = self
            .registry
            .values()
            .filter(|r| r.locality_id == record.locality_id && r.subject_id != record.subject_id)
            .map(|r| normalize(r, &self.schema))
            .collect::<Result<_>>()?;
        let check = locality_outlier_check(&x, &locality, &self.schema.feature_ids());

        let subject_id = record.subject_id.clone();
        let timestamp = record.collected_at;
        self.registry.insert(subject_id.clone(), record);
        self.predictions.insert(subject_id.clone(), prediction.clone());
        let alert = match check {
            OutlierCheck::Checked { flags } if !flags.is_empty() => Some(self.push_alert(
                AlertKind::LocalityOutlier,
                &subject_id,
                AlertDetail::Deviations { features: flags },
                timestamp,
            )),
            _ => None,
        };
        Ok(EnrollOutcome { status, prediction, alert })
    }

    /// Records an outcome, retrains, rescores the registry and alerts on
    /// every safe→vulnerable transition.
    pub fn report_incident(&mut self, label: IncidentLabel) -> Result<IncidentOutcome> {
        if !self.registry.contains_key(&label.subject_id) {
            return Err(Error::UnknownSubject(label.subject_id));
        }
        if self.labels.iter().any(|l| l.subject_id == label.subject_id && l.observed_at == label.observed_at) {
            return Err(Error::DuplicateLabel { subject_id: label.subject_id, observed_at: label.observed_at });
        }
        if self.pending_labels + 1 < self.retrain_every {
            self.labels.push(label);
            self.pending_labels += 1;
            return Ok(IncidentOutcome {
                retrained: false,
                model_version: self.learned.version,
                alerts: Vec::new(),
                downgrades: Vec::new(),
                single_class: false,
            });
        }

        // Compute everything first so a failure leaves the state untouched.
        let mut labels = self.labels.clone();
        labels.push(label.clone());
        let examples = self.training_set(&labels)?;
        let base = LearnedModel {
            coefficients: vec![0.0; self.schema.len()],
            intercept: 0.0,
            version: self.learned.version,
            trained_on: self.learned.trained_on,
        };
        let outcome = retrain(&base, &examples, &self.train)?;
        let next = self.rescore(&outcome.model)?;
        self.labels = labels;
        self.pending_labels = 0;
        let (alerts, downgrades) = self.install(outcome.model, next, label.observed_at);
        Ok(IncidentOutcome {
            retrained: true,
            model_version: self.learned.version,
            alerts,
            downgrades,
            single_class: outcome.degenerate_single_class,
        })
    }

    /// Replaces the learned model with an externally trained one (e.g. a
    /// global model pushed from a server), rescoring and alerting exactly as
    /// a local retrain does. The pushed model gets the next local version.
    pub fn adopt_model(&mut self, model: &LearnedModel, timestamp: u64) -> Result<IncidentOutcome> {
        if model.dim() != self.schema.len() {
            return Err(Error::DimensionMismatch { expected: self.schema.len(), got: model.dim() });
        }
        let model = LearnedModel { version: self.learned.version + 1, ..model.clone() };
        let next = self.rescore(&model)?;
        let (alerts, downgrades) = self.install(model, next, timestamp);
        Ok(IncidentOutcome { retrained: true, model_version: self.learned.version, alerts, downgrades, single_class: false })
    }

    fn rescore(&self, model: &LearnedModel) -> Result<BTreeMap<String, Prediction>> {
        self.registry
            .iter()
            .map(|(id, record)| {
                let x = normalize(record, &self.schema)?;
                Ok((id.clone(), score_blended(id, &x, &self.heuristic, model, &self.policy)?))
            })
            .collect()
    }

    /// Swaps in a model and its full prediction cache, then diffs the old
    /// cache against the new one.
    fn install(
        &mut self,
        model: LearnedModel,
        next: BTreeMap<String, Prediction>,
        timestamp: u64,
    ) -> (Vec<AlertEvent>, Vec<String>) {
        self.learned = model;
        let previous = std::mem::replace(&mut self.predictions, next);
        let mut flips = Vec::new();
        let mut downgrades = Vec::new();
        for (id, after) in &self.predictions {
            let before = &previous[id];
            match (before.vulnerable, after.vulnerable) {
                (false, true) => flips.push((id.clone(), before.score, after.score)),
                (true, false) => {
                    log::info!(
                        "agent {}: subject {} left the danger zone ({:.4} -> {:.4}, model v{})",
                        self.agent_id,
                        id,
                        before.score,
                        after.score,
                        after.model_version
                    );
                    downgrades.push(id.clone());
                }
                _ => {}
            }
        }
        let alerts = flips
            .into_iter()
            .map(|(id, before, after)| {
                self.push_alert(AlertKind::EnteredDangerZone, &id, AlertDetail::Score { before, after }, timestamp)
            })
            .collect();
        (alerts, downgrades)
    }

    /// The latest label of every labeled subject, in subject-id order.
    fn training_set(&self, labels: &[IncidentLabel]) -> Result<Vec<LabeledExample>> {
        let mut latest: BTreeMap<&str, &IncidentLabel> = BTreeMap::new();
        for l in labels {
            let slot = latest.entry(&l.subject_id).or_insert(l);
            if l.observed_at > slot.observed_at {
                *slot = l;
            }
        }
        latest
            .into_iter()
            .map(|(id, l)| {
                Ok(LabeledExample { features: normalize(&self.registry[id], &self.schema)?, target: l.outcome.target() })
            })
            .collect()
    }

    /// Up to `top_m` same-locality subjects, most similar first, ties by id.
    pub fn safety_peers(&self, subject_id: &str, top_m: usize) -> Result<Vec<(String, f64)>> {
        let me = self.registry.get(subject_id).ok_or_else(|| Error::UnknownSubject(subject_id.to_string()))?;
        if top_m == 0 {
            return Err(Error::BadConfig("top_m must be positive".into()));
        }
        let mut peers: Vec<(String, f64)> = self
            .registry
            .values()
            .filter(|r| r.locality_id == me.locality_id && r.subject_id != me.subject_id)
            .map(|r| Ok((r.subject_id.clone(), similarity(me, r, &self.schema)?)))
            .collect::<Result<_>>()?;
        peers.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        peers.truncate(top_m);
        Ok(peers)
    }

    fn state_json(&self) -> String {
        serde_json::to_string(self).expect("agent state serializes")
    }

    /// Hex SHA-256 of the serialized state; equal digests mean equal state.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.state_json().as_bytes()))
    }

    /// Versioned JSON snapshot whose checksum covers the exact state bytes.
    pub fn snapshot(&self) -> String {
        let state = self.state_json();
        let envelope = SnapshotOut {
            format: SNAPSHOT_FORMAT,
            version: SNAPSHOT_VERSION,
            checksum: hex::encode(Sha256::digest(state.as_bytes())),
            state: &RawValue::from_string(state).expect("state is valid JSON"),
        };
        serde_json::to_string(&envelope).expect("snapshot serializes")
    }

    /// Rebuilds a state from [`AgentState::snapshot`] output. Any damage
    /// yields `CorruptSnapshot`; no partial state is ever returned.
    pub fn restore(text: &str) -> Result<AgentState> {
        let corrupt = |location: String, reason: String| Error::CorruptSnapshot { location, reason };
        let de = &mut serde_json::Deserializer::from_str(text);
        let envelope: SnapshotIn = serde_path_to_error::deserialize(de)
            .map_err(|e| corrupt(path_or_root(e.path().to_string()), e.inner().to_string()))?;
        if envelope.format != SNAPSHOT_FORMAT {
            return Err(corrupt("format".into(), format!("unexpected format `{}`", envelope.format)));
        }
        if envelope.version != SNAPSHOT_VERSION {
            return Err(corrupt("version".into(), format!("unsupported version {}", envelope.version)));
        }
        let raw = envelope.state.get();
        let de = &mut serde_json::Deserializer::from_str(raw);
        let state: AgentState = serde_path_to_error::deserialize(de)
            .map_err(|e| corrupt(format!("state.{}", e.path()), e.inner().to_string()))?;
        if hex::encode(Sha256::digest(raw.as_bytes())) != envelope.checksum {
            return Err(corrupt("checksum".into(), "state bytes do not match the recorded checksum".into()));
        }
        state.check_invariants().map_err(|(location, reason)| corrupt(format!("state.{location}"), reason))?;
        Ok(state)
    }

    fn check_invariants(&self) -> std::result::Result<(), (String, String)> {
        let d = self.schema.len();
        if self.heuristic.dim() != d || self.learned.dim() != d {
            return Err(("learned".into(), "model dimension differs from schema".into()));
        }
        if self.retrain_every == 0 {
            return Err(("retrain_every".into(), "must be positive".into()));
        }
        if !self.registry.keys().eq(self.predictions.keys()) {
            return Err(("predictions".into(), "cache does not cover the registry".into()));
        }
        for (id, r) in &self.registry {
            if *id != r.subject_id {
                return Err((format!("registry.{id}"), "key differs from subject_id".into()));
            }
            if let Err(e) = normalize(r, &self.schema) {
                return Err((format!("registry.{id}"), e.to_string()));
            }
        }
        if let Some(l) = self.labels.iter().find(|l| !self.registry.contains_key(&l.subject_id)) {
            return Err(("labels".into(), format!("label for unknown subject `{}`", l.subject_id)));
        }
        if self.alerts.windows(2).any(|w| w[1].alert_id <= w[0].alert_id) {
            return Err(("alerts".into(), "alert ids are not increasing".into()));
        }
        Ok(())
    }
}

fn path_or_root(path: String) -> String {
    if path == "." {
        "<root>".into()
    } else {
        path
    }
}

#[derive(Serialize)]
struct SnapshotOut<'a> {
    format: &'a str,
    version: u32,
    checksum: String,
    state: &'a RawValue,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SnapshotIn<'a> {
    format: String,
    version: u32,
    checksum: String,
    #[serde(borrow)]
    state: &'a RawValue,
}
