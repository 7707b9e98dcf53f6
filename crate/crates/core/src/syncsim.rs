//! Deterministic discrete-event simulation of several agent devices and one
//! central server. Agents keep their own models; the server aggregates their
//! data, runs cohort analytics and trains a global model for comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analytics::{cluster_dataset, min_components_for, pca, similarity_stats, matrix_from_rows, DEFAULT_EVR_TARGET};
use crate::cohortgen::{generate, GenConfig};
use crate::engine::{AgentState, AlertKind};
use crate::error::{Error, Result};
use crate::schema::{normalize, Dataset, FeatureSchema, IncidentLabel, Outcome, SurveyRecord};
use crate::scoring::{retrain, LabeledExample, LearnedModel, ModelFile, TrainConfig};

/// Number of factors reported by [`central_retrain`].
pub const CRITICAL_FACTORS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    Enroll,
    Incident,
    Sync,
    CohortAnalysis,
}

/// One scripted event. `payload` is a survey record for `ENROLL` and an
/// incident label for `INCIDENT`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimEvent {
    pub time: u64,
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<serde_json::Value>,
}

impl SimEvent {
    pub fn enroll(time: u64, agent: &str, record: &SurveyRecord) -> Self {
        SimEvent {
            time,
            kind: EventKind::Enroll,
            agent_id: Some(agent.into()),
            payload: Some(serde_json::to_value(record).expect("record serializes")),
        }
    }

    pub fn incident(time: u64, agent: &str, label: &IncidentLabel) -> Self {
        SimEvent {
            time,
            kind: EventKind::Incident,
            agent_id: Some(agent.into()),
            payload: Some(serde_json::to_value(label).expect("label serializes")),
        }
    }

    pub fn sync(time: u64, agent: &str) -> Self {
        SimEvent { time, kind: EventKind::Sync, agent_id: Some(agent.into()), payload: None }
    }

    pub fn cohort_analysis(time: u64) -> Self {
        SimEvent { time, kind: EventKind::CohortAnalysis, agent_id: None, payload: None }
    }
}

/// Parses a JSONL scenario; blank lines are skipped.
pub fn parse_script(text: &str) -> Result<Vec<SimEvent>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line)
                .map_err(|e| Error::Scenario { event: format!("line {}", i + 1), reason: e.to_string() })
        })
        .collect()
}

pub fn script_to_jsonl(events: &[SimEvent]) -> String {
    events.iter().map(|e| serde_json::to_string(e).expect("event serializes") + "\n").collect()
}

fn default_label_fraction() -> f64 {
    0.2
}
fn default_max_label_delay() -> u64 {
    50
}

fn cohort_overrides<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<GenConfig, D::Error> {
    let value = serde_json::Value::deserialize(d)?;
    GenConfig::from_overrides(value).map_err(serde::de::Error::custom)
}

/// Scenario generation from a synthetic cohort.
///
/// Localities are dealt round-robin to agents in order of first appearance;
/// each record is enrolled at its `collected_at` tick by its locality's
/// agent. Using its own random stream, each agent then labels a fraction of
/// its subjects after a random delay; the chance of `trafficked` is the mean
/// normalized value of `risk_features` (default: the first four features).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    /// Fields omitted here take their calibrated values.
    #[serde(deserialize_with = "cohort_overrides")]
    pub cohort: GenConfig,
    #[serde(default = "default_label_fraction")]
    pub label_fraction: f64,
    #[serde(default = "default_max_label_delay")]
    pub max_label_delay: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub risk_features: Option<Vec<String>>,
    /// Schedule a cohort analysis every this many ticks (0: only at the end).
    #[serde(default)]
    pub analysis_period: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Events(Vec<SimEvent>),
    /// JSONL file; relative paths resolve against the config file.
    Script(PathBuf),
    Generator(GeneratorParams),
}

fn default_retrain_every() -> usize {
    1
}
fn default_clusters() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_agents: usize,
    pub seed: u64,
    /// Every agent syncs at each multiple of this many ticks.
    pub sync_period: u64,
    pub scenario: Scenario,
    /// Push the server's global model back to agents after each analysis.
    #[serde(default)]
    pub push_back: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<FeatureSchema>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub models: Option<ModelFile>,
    /// Epochs, learning rate and balancing; the seed is always drawn from
    /// the simulation's `training` stream.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default = "default_retrain_every")]
    pub retrain_every: usize,
    #[serde(default = "default_clusters")]
    pub analysis_clusters: usize,
}

impl SimConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::BadConfig(e.to_string()))
    }

    /// Reads a config file, inlining a `script` scenario.
    pub fn load(path: &Path) -> Result<Self> {
        let mut config = Self::from_json(&std::fs::read_to_string(path)?)?;
        if let Scenario::Script(script) = &config.scenario {
            let full = match path.parent() {
                Some(dir) if script.is_relative() => dir.join(script),
                _ => script.clone(),
            };
            config.scenario = Scenario::Events(parse_script(&std::fs::read_to_string(&full)?)?);
        }
        Ok(config)
    }

    pub fn schema(&self) -> FeatureSchema {
        match (&self.schema, &self.scenario) {
            (Some(s), _) => s.clone(),
            (None, Scenario::Generator(g)) => g.cohort.schema(),
            _ => FeatureSchema::default_schema(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_agents == 0 {
            return Err(Error::BadConfig("n_agents must be at least 1".into()));
        }
        if self.sync_period == 0 {
            return Err(Error::BadConfig("sync_period must be positive".into()));
        }
        if self.retrain_every == 0 || self.analysis_clusters == 0 {
            return Err(Error::BadConfig("retrain_every and analysis_clusters must be positive".into()));
        }
        if let Scenario::Generator(g) = &self.scenario {
            if !(0.0..=1.0).contains(&g.label_fraction) || g.max_label_delay == 0 {
                return Err(Error::BadConfig("label_fraction must lie in [0,1] and max_label_delay be positive".into()));
            }
        }
        Ok(())
    }
}

pub fn agent_name(i: usize) -> String {
    format!("agent-{i}")
}

/// Independent random stream named `name` under `seed`.
pub fn named_stream(seed: u64, name: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(name.as_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")));
    rng
}

/// Records and labels pushed by agents, plus the global model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerStore {
    pub schema: FeatureSchema,
    /// Latest record per subject across agents.
    pub records: BTreeMap<String, SurveyRecord>,
    /// Every synced label with the agent that reported it, in arrival order.
    pub labels: Vec<(String, IncidentLabel)>,
    pub global: Option<LearnedModel>,
}

impl ServerStore {
    pub fn new(schema: FeatureSchema) -> Self {
        ServerStore { schema, records: BTreeMap::new(), labels: Vec::new(), global: None }
    }

    fn push_record(&mut self, record: &SurveyRecord) {
        match self.records.get(&record.subject_id) {
            Some(prev) if prev.collected_at >= record.collected_at => {}
            _ => {
                self.records.insert(record.subject_id.clone(), record.clone());
            }
        }
    }

    pub fn dataset(&self) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            records: self.records.values().cloned().collect(),
            labels: self.labels.iter().map(|(_, l)| l.clone()).collect(),
        }
    }

    /// Latest label per subject (ties by arrival), subject-id order.
    pub fn training_set(&self) -> Result<Vec<LabeledExample>> {
        let mut latest: BTreeMap<&str, &IncidentLabel> = BTreeMap::new();
        for (_, l) in &self.labels {
            let slot = latest.entry(&l.subject_id).or_insert(l);
            if l.observed_at > slot.observed_at {
                *slot = l;
            }
        }
        latest
            .into_iter()
            .map(|(id, l)| {
                let record = self.records.get(id).ok_or_else(|| Error::UnknownSubject(id.to_string()))?;
                Ok(LabeledExample { features: normalize(record, &self.schema)?, target: l.outcome.target() })
            })
            .collect()
    }
}

/// The top factors of a global model and how they moved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalFactors {
    pub model_version: u64,
    pub trained_on: usize,
    pub top: Vec<String>,
    pub gained: Vec<String>,
    pub lost: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentralRetrain {
    pub model: LearnedModel,
    pub factors: CriticalFactors,
}

/// Trains a global model on the server's labeled data from zero weights and
/// compares its top five factors with `previous`'s.
pub fn central_retrain(store: &ServerStore, previous: Option<&LearnedModel>, train: &TrainConfig) -> Result<CentralRetrain> {
    let examples = store.training_set()?;
    if examples.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let d = store.schema.len();
    let base = LearnedModel { version: previous.map_or(0, |p| p.version), ..LearnedModel::zeros(d) };
    let model = retrain(&base, &examples, train)?.model;
    let ids = store.schema.feature_ids();
    let names = |m: &LearnedModel| -> Vec<String> { m.top_features(CRITICAL_FACTORS).into_iter().map(|j| ids[j].clone()).collect() };
    let top = names(&model);
    let before = previous.map(names).unwrap_or_default();
    let gained = top.iter().filter(|f| !before.contains(f)).cloned().collect();
    let lost = before.iter().filter(|f| !top.contains(f)).cloned().collect();
    let factors = CriticalFactors { model_version: model.version, trained_on: model.trained_on, top, gained, lost };
    Ok(CentralRetrain { model, factors })
}

/// Share of (probe record, agent pair) combinations classified differently.
/// Zero with fewer than two agents or an empty probe.
pub fn probe_disagreement(agents: &[&AgentState], probe: &[SurveyRecord]) -> Result<f64> {
    if agents.len() < 2 || probe.is_empty() {
        return Ok(0.0);
    }
    let classes: Vec<Vec<bool>> = agents
        .iter()
        .map(|a| probe.iter().map(|r| Ok(a.score(r)?.vulnerable)).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let mut differ = 0u64;
    let mut total = 0u64;
    for i in 0..agents.len() {
        for j in i + 1..agents.len() {
            for (a, b) in classes[i].iter().zip(&classes[j]) {
                total += 1;
                differ += u64::from(a != b);
            }
        }
    }
    Ok(differ as f64 / total as f64)
}

pub fn model_digest(model: &LearnedModel) -> String {
    hex::encode(Sha256::digest(serde_json::to_string(model).expect("model serializes").as_bytes()))
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub time: u64,
    pub n_records: usize,
    pub n_labels: usize,
    pub first_pc_evr: Option<f64>,
    pub components_for_85: Option<usize>,
    pub duplicate_partner_fraction: Option<f64>,
    pub cluster_sizes: Vec<usize>,
    pub critical_factors: Option<CriticalFactors>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlertCounts {
    pub entered_danger_zone: usize,
    pub locality_outlier: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSummary {
    pub agent_id: String,
    pub model_digest: String,
    pub model_version: u64,
    pub trained_on: usize,
    pub subjects: usize,
    pub labels: usize,
    pub alerts: AlertCounts,
    pub state_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub seq: usize,
    pub time: u64,
    pub kind: EventKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub agent_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subject_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_version: Option<u64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub alerts: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub seed: u64,
    pub n_agents: usize,
    pub events_processed: usize,
    pub agents: Vec<AgentSummary>,
    /// Euclidean distances between agents' coefficient vectors.
    pub divergence: Vec<Vec<f64>>,
    pub probe_size: usize,
    pub disagreement_rate: f64,
    pub server_records: usize,
    pub server_labels: usize,
    pub global_model_digest: Option<String>,
    pub cohort_analyses: Vec<CohortSummary>,
    #[serde(skip)]
    pub trace: Vec<TraceEntry>,
}

impl SimReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn trace_jsonl(&self) -> String {
        self.trace.iter().map(|t| serde_json::to_string(t).expect("trace serializes") + "\n").collect()
    }

    pub fn divergence_csv(&self) -> String {
        let mut csv = String::from("agent");
        for a in &self.agents {
            write!(csv, ",{}", a.agent_id).unwrap();
        }
        csv.push('\n');
        for (a, row) in self.agents.iter().zip(&self.divergence) {
            csv.push_str(&a.agent_id);
            for v in row {
                write!(csv, ",{v}").unwrap();
            }
            csv.push('\n');
        }
        csv
    }

    /// Writes `report.json`, `trace.jsonl` and `divergence.csv` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.to_json())?;
        std::fs::write(dir.join("trace.jsonl"), self.trace_jsonl())?;
        std::fs::write(dir.join("divergence.csv"), self.divergence_csv())?;
        Ok(())
    }
}

enum Action {
    Enroll(usize, SurveyRecord),
    Incident(usize, IncidentLabel),
    Sync(usize),
    CohortAnalysis,
}

struct Queued {
    time: u64,
    label: String,
    action: Action,
}

fn resolve(events: &[SimEvent], n_agents: usize) -> Result<Vec<Queued>> {
    let agent_index = |e: &SimEvent, label: &str| -> Result<usize> {
        let id = e.agent_id.as_deref().ok_or_else(|| Error::Scenario { event: label.into(), reason: "missing agent_id".into() })?;
        (0..n_agents)
            .find(|&i| agent_name(i) == id)
            .ok_or_else(|| Error::Scenario { event: label.into(), reason: format!("unknown agent `{id}`") })
    };
    fn payload<T: serde::de::DeserializeOwned>(e: &SimEvent, label: &str) -> Result<T> {
        let value = e.payload.clone().ok_or_else(|| Error::Scenario { event: label.into(), reason: "missing payload".into() })?;
        serde_json::from_value(value).map_err(|err| Error::Scenario { event: label.into(), reason: format!("bad payload: {err}") })
    }
    events
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let label = format!("#{i} ({:?} at t={})", e.kind, e.time);
            let action = match e.kind {
                EventKind::Enroll => Action::Enroll(agent_index(e, &label)?, payload(e, &label)?),
                EventKind::Incident => Action::Incident(agent_index(e, &label)?, payload(e, &label)?),
                EventKind::Sync => Action::Sync(agent_index(e, &label)?),
                EventKind::CohortAnalysis => {
                    if e.agent_id.is_some() {
                        return Err(Error::Scenario { event: label, reason: "COHORT_ANALYSIS takes no agent_id".into() });
                    }
                    Action::CohortAnalysis
                }
            };
            Ok(Queued { time: e.time, label, action })
        })
        .collect()
}

/// Builds the event script a generator config describes.
pub fn generate_scenario(params: &GeneratorParams, n_agents: usize, seed: u64) -> Result<Vec<SimEvent>> {
    let mut scenario_rng = named_stream(seed, "scenario");
    let cohort = GenConfig { seed: scenario_rng.next_u64(), ..params.cohort.clone() };
    let data = generate(&cohort)?.valid_only();
    let schema = &data.schema;
    let risk: Vec<usize> = match &params.risk_features {
        Some(ids) => ids
            .iter()
            .map(|id| schema.index_of(id).ok_or_else(|| Error::BadConfig(format!("unknown risk feature `{id}`"))))
            .collect::<Result<_>>()?,
        None => (0..schema.len().min(4)).collect(),
    };

    let mut owner: BTreeMap<&str, usize> = BTreeMap::new();
    let mut next_agent = 0;
    let mut per_agent: Vec<Vec<&SurveyRecord>> = vec![Vec::new(); n_agents];
    for r in &data.records {
        let agent = *owner.entry(&r.locality_id).or_insert_with(|| {
            next_agent += 1;
            (next_agent - 1) % n_agents
        });
        per_agent[agent].push(r);
    }

    let mut events = Vec::new();
    for (i, records) in per_agent.iter().enumerate() {
        let name = agent_name(i);
        let mut rng = named_stream(seed, &name);
        for r in records {
            events.push(SimEvent::enroll(r.collected_at, &name, r));
            if rng.random::<f64>() < params.label_fraction {
                let x = normalize(r, schema)?;
                let p = if risk.is_empty() { 0.5 } else { risk.iter().map(|&j| x[j]).sum::<f64>() / risk.len() as f64 };
                let outcome = if rng.random::<f64>() < p { Outcome::Trafficked } else { Outcome::ConfirmedSafe };
                let t = r.collected_at + rng.random_range(1..=params.max_label_delay);
                events.push(SimEvent::incident(t, &name, &IncidentLabel { subject_id: r.subject_id.clone(), outcome, observed_at: t }));
            }
        }
    }
    events.sort_by_key(|e| e.time);
    let end = events.last().map_or(0, |e| e.time);
    if params.analysis_period > 0 {
        let mut t = params.analysis_period;
        while t < end {
            events.push(SimEvent::cohort_analysis(t));
            t += params.analysis_period;
        }
    }
    events.push(SimEvent::cohort_analysis(end + 1));
    events.sort_by_key(|e| e.time);
    Ok(events)
}

/// Runs the simulation. The same config always yields the same report.
pub fn run(config: &SimConfig) -> Result<SimReport> {
    config.validate()?;
    let schema = config.schema();
    let events = match &config.scenario {
        Scenario::Events(events) => events.clone(),
        Scenario::Script(path) => parse_script(&std::fs::read_to_string(path)?)?,
        Scenario::Generator(params) => generate_scenario(params, config.n_agents, config.seed)?,
    };
    let mut queue = resolve(&events, config.n_agents)?;
    // Automatic syncs at every multiple of the period and once more at the
    // final tick; at equal times they run before scripted events, so a
    // closing COHORT_ANALYSIS sees every agent's data.
    let end = queue.iter().map(|q| q.time).max().unwrap_or(0);
    let mut sync_times: Vec<u64> = (1..).map(|k| k * config.sync_period).take_while(|&t| t < end).collect();
    sync_times.push(end);
    let mut auto = Vec::new();
    for t in sync_times {
        for i in 0..config.n_agents {
            auto.push(Queued { time: t, label: format!("auto sync {} at t={t}", agent_name(i)), action: Action::Sync(i) });
        }
    }
    auto.append(&mut queue);
    let mut queue = auto;
    queue.sort_by_key(|q| q.time);

    let models = config.models.clone().unwrap_or_else(|| ModelFile::default_for(schema.len()));
    let train = TrainConfig { seed: named_stream(config.seed, "training").next_u64(), ..config.train.unwrap_or_default() };
    let mut agents: Vec<AgentState> = (0..config.n_agents)
        .map(|i| {
            let mut a = AgentState::new(agent_name(i), schema.clone(), models.clone(), train)?;
            a.set_retrain_every(config.retrain_every)?;
            Ok(a)
        })
        .collect::<Result<_>>()?;
    let mut server = ServerStore::new(schema.clone());
    let mut synced_labels = vec![0usize; config.n_agents];
    let mut probe: BTreeMap<String, SurveyRecord> = BTreeMap::new();
    let mut analyses = Vec::new();
    let mut trace = Vec::with_capacity(queue.len());

    for (seq, q) in queue.iter().enumerate() {
        let scenario_err = |e: Error| Error::Scenario { event: q.label.clone(), reason: e.to_string() };
        let mut entry = TraceEntry {
            seq,
            time: q.time,
            kind: EventKind::Sync,
            agent_id: None,
            subject_id: None,
            model_version: None,
            alerts: Vec::new(),
            note: None,
        };
        match &q.action {
            Action::Enroll(i, record) => {
                let out = agents[*i].enroll(record.clone()).map_err(scenario_err)?;
                match probe.get(&record.subject_id) {
                    Some(prev) if prev.collected_at >= record.collected_at => {}
                    _ => {
                        probe.insert(record.subject_id.clone(), record.clone());
                    }
                }
                entry.kind = EventKind::Enroll;
                entry.agent_id = Some(agent_name(*i));
                entry.subject_id = Some(record.subject_id.clone());
                entry.model_version = Some(out.prediction.model_version);
                entry.alerts = out.alert.iter().map(|a| a.alert_id).collect();
                entry.note = Some(format!("{:?} score={} vulnerable={}", out.status, out.prediction.score, out.prediction.vulnerable));
            }
            Action::Incident(i, label) => {
                let out = agents[*i].report_incident(label.clone()).map_err(scenario_err)?;
                entry.kind = EventKind::Incident;
                entry.agent_id = Some(agent_name(*i));
                entry.subject_id = Some(label.subject_id.clone());
                entry.model_version = Some(out.model_version);
                entry.alerts = out.alerts.iter().map(|a| a.alert_id).collect();
                entry.note = Some(format!("{} retrained={} downgrades={}", label.outcome.as_str(), out.retrained, out.downgrades.len()));
            }
            Action::Sync(i) => {
                let agent = &agents[*i];
                for record in agent.registry().values() {
                    server.push_record(record);
                }
                let fresh = &agent.labels()[synced_labels[*i]..];
                server.labels.extend(fresh.iter().map(|l| (agent_name(*i), l.clone())));
                synced_labels[*i] = agent.labels().len();
                entry.agent_id = Some(agent_name(*i));
                entry.note = Some(format!("pushed {} labels", fresh.len()));
            }
            Action::CohortAnalysis => {
                let summary = cohort_analysis(&mut server, q.time, &train, config.analysis_clusters).map_err(scenario_err)?;
                if config.push_back {
                    if let Some(global) = server.global.clone() {
                        for agent in &mut agents {
                            let out = agent.adopt_model(&global, q.time).map_err(scenario_err)?;
                            entry.alerts.extend(out.alerts.iter().map(|a| a.alert_id));
                        }
                    }
                }
                entry.kind = EventKind::CohortAnalysis;
                entry.model_version = server.global.as_ref().map(|m| m.version);
                entry.note = Some(format!("analysis {} over {} records", analyses.len(), summary.n_records));
                analyses.push(summary);
            }
        }
        trace.push(entry);
    }

    let probe: Vec<SurveyRecord> = probe.into_values().collect();
    let refs: Vec<&AgentState> = agents.iter().collect();
    let disagreement_rate = probe_disagreement(&refs, &probe)?;
    let divergence = agents
        .iter()
        .map(|a| agents.iter().map(|b| euclidean(&a.learned().coefficients, &b.learned().coefficients)).collect())
        .collect();
    let summaries = agents
        .iter()
        .map(|a| {
            let mut alerts = AlertCounts::default();
            for alert in a.alerts() {
                match alert.kind {
                    AlertKind::EnteredDangerZone => alerts.entered_danger_zone += 1,
                    AlertKind::LocalityOutlier => alerts.locality_outlier += 1,
                }
            }
            AgentSummary {
                agent_id: a.agent_id().to_string(),
                model_digest: model_digest(a.learned()),
                model_version: a.learned().version,
                trained_on: a.learned().trained_on,
                subjects: a.registry().len(),
                labels: a.labels().len(),
                alerts,
                state_digest: a.digest(),
            }
        })
        .collect();
    Ok(SimReport {
        seed: config.seed,
        n_agents: config.n_agents,
        events_processed: queue.len(),
        agents: summaries,
        divergence,
        probe_size: probe.len(),
        disagreement_rate,
        server_records: server.records.len(),
        server_labels: server.labels.len(),
        global_model_digest: server.global.as_ref().map(model_digest),
        cohort_analyses: analyses,
        trace,
    })
}

fn cohort_analysis(server: &mut ServerStore, time: u64, train: &TrainConfig, clusters: usize) -> Result<CohortSummary> {
    let data = server.dataset();
    let n = data.records.len();
    let mut summary = CohortSummary {
        time,
        n_records: n,
        n_labels: server.labels.len(),
        first_pc_evr: None,
        components_for_85: None,
        duplicate_partner_fraction: None,
        cluster_sizes: Vec::new(),
        critical_factors: None,
    };
    if n >= 2 {
        summary.duplicate_partner_fraction = Some(similarity_stats(&data)?.duplicate_partner_fraction);
        let p = pca(&matrix_from_rows(&data.normalized_rows()?)?)?;
        if !p.is_degenerate() {
            summary.first_pc_evr = Some(p.explained_variance_ratio[0]);
            summary.components_for_85 = Some(min_components_for(DEFAULT_EVR_TARGET, &p));
            let analysis = cluster_dataset(&data, None, clusters)?;
            let mut sizes = vec![0; analysis.labels.iter().max().map_or(0, |m| m + 1)];
            for &l in &analysis.labels {
                sizes[l] += 1;
            }
            summary.cluster_sizes = sizes;
        }
    }
    if !server.labels.is_empty() {
        let result = central_retrain(server, server.global.as_ref(), train)?;
        summary.critical_factors = Some(result.factors);
        server.global = Some(result.model);
    }
    Ok(summary)
}
