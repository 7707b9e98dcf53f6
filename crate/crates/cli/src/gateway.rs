//! Request dispatch, per-agent serialization and snapshot persistence.
//!
//! Each agent has one writer lock and a read-mostly pointer to its latest
//! committed state. A mutation runs on a private copy, the copy's snapshot is
//! written to disk (temp file, fsync, rename), and only then is the copy
//! published and the request acknowledged. A failure at any step leaves the
//! committed state untouched.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use sentinel_core::analytics::{cluster_dataset, similarity_stats};
use sentinel_core::engine::AgentState;
use sentinel_core::scoring::{ModelFile, TrainConfig};
use sentinel_core::{FeatureSchema, IncidentLabel, SurveyRecord};

use crate::api::{ApiError, ApiRequest, ApiResponse, Operation};

/// Settings applied to agents created on first contact.
#[derive(Debug, Clone)]
pub struct AgentTemplate {
    pub schema: FeatureSchema,
    pub models: ModelFile,
    pub train: TrainConfig,
    pub retrain_every: usize,
}

impl Default for AgentTemplate {
    fn default() -> Self {
        let schema = FeatureSchema::default_schema();
        let models = ModelFile::default_for(schema.len());
        AgentTemplate { schema, models, train: TrainConfig::default(), retrain_every: 1 }
    }
}

impl AgentTemplate {
    /// A fresh agent state; identical to what the gateway creates.
    pub fn instantiate(&self, agent_id: &str) -> sentinel_core::Result<AgentState> {
        let mut state = AgentState::new(agent_id, self.schema.clone(), self.models.clone(), self.train)?;
        state.set_retrain_every(self.retrain_every)?;
        Ok(state)
    }
}

#[derive(Default)]
struct AgentSlot {
    writer: Mutex<()>,
    committed: RwLock<Option<Arc<AgentState>>>,
}

pub struct Gateway {
    data_dir: PathBuf,
    template: AgentTemplate,
    agents: Mutex<HashMap<String, Arc<AgentSlot>>>,
}

pub fn valid_agent_id(id: &str) -> bool {
    (1..=64).contains(&id.len()) && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

pub fn snapshot_path(data_dir: &Path, agent_id: &str) -> PathBuf {
    data_dir.join("agents").join(format!("{agent_id}.snapshot.json"))
}

fn storage(e: impl std::fmt::Display) -> ApiError {
    ApiError::new("storage_error", e.to_string(), None)
}

fn core(e: sentinel_core::Error) -> ApiError {
    ApiError::from_core(&e)
}

fn payload<T: DeserializeOwned>(req: &ApiRequest) -> Result<T, ApiError> {
    let value = if req.payload.is_null() { json!({}) } else { req.payload.clone() };
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { "payload".to_string() } else { format!("payload.{path}") };
        ApiError::new("bad_request", e.inner().to_string(), Some(field))
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SubjectQuery {
    subject_id: String,
}

fn default_top_m() -> usize {
    5
}
fn default_clusters() -> usize {
    3
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PeersQuery {
    subject_id: String,
    #[serde(default = "default_top_m")]
    top_m: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AlertsQuery {
    #[serde(default)]
    since: u64,
    #[serde(default)]
    limit: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ClusterQuery {
    #[serde(default = "default_clusters")]
    clusters: usize,
    #[serde(default)]
    dims: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Empty {}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RestorePayload {
    snapshot: String,
}

#[derive(Serialize)]
struct ClusterPoint {
    subject_id: String,
    locality_id: String,
    coords: Vec<f64>,
    cluster: usize,
}

impl Gateway {
    pub fn new(data_dir: impl Into<PathBuf>, template: AgentTemplate) -> std::io::Result<Self> {
        let data_dir = data_dir.into();
        fs::create_dir_all(data_dir.join("agents"))?;
        Ok(Gateway { data_dir, template, agents: Mutex::new(HashMap::new()) })
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    pub fn template(&self) -> &AgentTemplate {
        &self.template
    }

    /// Latest committed state of `agent_id`, loading it from disk if needed.
    pub fn state(&self, agent_id: &str) -> Result<Option<Arc<AgentState>>, ApiError> {
        let slot = self.slot(agent_id)?;
        let guard = slot.committed.read().expect("state lock poisoned");
        Ok(guard.clone())
    }

    fn slot(&self, agent_id: &str) -> Result<Arc<AgentSlot>, ApiError> {
        if !valid_agent_id(agent_id) {
            return Err(ApiError::new(
                "invalid_agent_id",
                "agent ids are 1-64 characters from [A-Za-z0-9_-]",
                Some("agent_id".into()),
            ));
        }
        let mut agents = self.agents.lock().expect("agent map poisoned");
        if let Some(slot) = agents.get(agent_id) {
            return Ok(slot.clone());
        }
        let path = snapshot_path(&self.data_dir, agent_id);
        let committed = match fs::read_to_string(&path) {
            Ok(text) => {
                let state = AgentState::restore(&text).map_err(core)?;
                if state.agent_id() != agent_id {
                    return Err(ApiError::new("corrupt_snapshot", format!("{} holds another agent", path.display()), None));
                }
                Some(Arc::new(state))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(storage(e)),
        };
        let slot = Arc::new(AgentSlot { writer: Mutex::new(()), committed: RwLock::new(committed) });
        agents.insert(agent_id.to_string(), slot.clone());
        Ok(slot)
    }

    fn persist(&self, state: &AgentState) -> Result<(), ApiError> {
        let final_path = snapshot_path(&self.data_dir, state.agent_id());
        let dir = final_path.parent().expect("snapshot path has a parent");
        let tmp = dir.join(format!(".{}.snapshot.json.tmp", state.agent_id()));
        let mut file = File::create(&tmp).map_err(storage)?;
        file.write_all(state.snapshot().as_bytes()).map_err(storage)?;
        file.sync_all().map_err(storage)?;
        drop(file);
        fs::rename(&tmp, &final_path).map_err(storage)?;
        // Make the rename itself durable.
        File::open(dir).and_then(|d| d.sync_all()).map_err(storage)?;
        Ok(())
    }

    /// Serves one request. Never panics on bad input; errors come back in
    /// the envelope.
    pub fn handle(&self, req: &ApiRequest) -> ApiResponse {
        let result = if req.operation.is_mutation() { self.mutate(req) } else { self.read(req) };
        match result {
            Ok(value) => ApiResponse::success(req, value),
            Err(error) => ApiResponse::failure(req, error),
        }
    }

    fn mutate(&self, req: &ApiRequest) -> Result<Value, ApiError> {
        let slot = self.slot(&req.agent_id)?;
        let _writer = slot.writer.lock().expect("writer lock poisoned");
        let current = slot.committed.read().expect("state lock poisoned").clone();
        let mut next = match &current {
            Some(state) => AgentState::clone(state),
            None => self.template.instantiate(&req.agent_id).map_err(core)?,
        };
        let result = match req.operation {
            Operation::Enroll => {
                let record: SurveyRecord = payload(req)?;
                serde_json::to_value(next.enroll(record).map_err(core)?)
            }
            Operation::ReportIncident => {
                let label: IncidentLabel = payload(req)?;
                serde_json::to_value(next.report_incident(label).map_err(core)?)
            }
            Operation::Restore => {
                let p: RestorePayload = payload(req)?;
                let restored = AgentState::restore(&p.snapshot).map_err(core)?;
                if restored.agent_id() != req.agent_id {
                    return Err(ApiError::new(
                        "bad_request",
                        format!("snapshot belongs to agent `{}`", restored.agent_id()),
                        Some("payload.snapshot".into()),
                    ));
                }
                next = restored;
                Ok(json!({ "digest": next.digest() }))
            }
            _ => unreachable!("read operations are not dispatched here"),
        }
        .map_err(|e| ApiError::new("internal", e.to_string(), None))?;
        self.persist(&next)?;
        *slot.committed.write().expect("state lock poisoned") = Some(Arc::new(next));
        Ok(result)
    }

    fn read(&self, req: &ApiRequest) -> Result<Value, ApiError> {
        let state = self
            .state(&req.agent_id)?
            .ok_or_else(|| ApiError::new("unknown_agent", format!("no agent `{}`", req.agent_id), Some("agent_id".into())))?;
        let to_value = |v: Result<Value, serde_json::Error>| v.map_err(|e| ApiError::new("internal", e.to_string(), None));
        match req.operation {
            Operation::GetPrediction => {
                let q: SubjectQuery = payload(req)?;
                to_value(serde_json::to_value(state.prediction(&q.subject_id).map_err(core)?))
            }
            Operation::ListAlerts => {
                let q: AlertsQuery = payload(req)?;
                let mut alerts = state.alerts_since(q.since);
                if let Some(limit) = q.limit {
                    alerts = &alerts[..limit.min(alerts.len())];
                }
                let next_cursor = alerts.last().map_or(q.since, |a| a.alert_id);
                Ok(json!({ "alerts": alerts, "next_cursor": next_cursor }))
            }
            Operation::SafetyPeers => {
                let q: PeersQuery = payload(req)?;
                let peers = state.safety_peers(&q.subject_id, q.top_m).map_err(|e| match e {
                    sentinel_core::Error::BadConfig(m) => ApiError::new("bad_request", m, Some("payload.top_m".into())),
                    other => core(other),
                })?;
                let peers: Vec<Value> = peers.into_iter().map(|(id, s)| json!({ "subject_id": id, "similarity": s })).collect();
                Ok(json!({ "subject_id": q.subject_id, "peers": peers }))
            }
            Operation::ClusterView => {
                let q: ClusterQuery = payload(req)?;
                let data = state.registry_dataset();
                let analysis = cluster_dataset(&data, q.dims, q.clusters).map_err(core)?;
                let shown = analysis.dims.min(2);
                let points: Vec<ClusterPoint> = data
                    .records
                    .iter()
                    .enumerate()
                    .map(|(i, r)| ClusterPoint {
                        subject_id: r.subject_id.clone(),
                        locality_id: r.locality_id.clone(),
                        coords: (0..shown).map(|j| analysis.projected[(i, j)]).collect(),
                        cluster: analysis.labels[i],
                    })
                    .collect();
                Ok(json!({
                    "dims": analysis.dims,
                    "explained_variance_ratio": analysis.pca.explained_variance_ratio,
                    "points": points,
                }))
            }
            Operation::SimilarityStats => {
                let _: Empty = payload(req)?;
                to_value(serde_json::to_value(similarity_stats(&state.registry_dataset()).map_err(core)?))
            }
            Operation::Snapshot => {
                let _: Empty = payload(req)?;
                Ok(json!({ "snapshot": state.snapshot(), "digest": state.digest() }))
            }
            _ => unreachable!("mutations are not dispatched here"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use sentinel_core::schema::{FeatureDef, FeatureKind};
    use sentinel_core::scoring::BlendPolicy;

    fn template() -> AgentTemplate {
        let schema =
            FeatureSchema::new(1, (0..4).map(|i| FeatureDef::new(format!("b{i}"), FeatureKind::Binary, "")).collect()).unwrap();
        let mut models = ModelFile::default_for(4);
        models.policy = BlendPolicy::new(0, 1).unwrap();
        AgentTemplate { schema, models, train: TrainConfig::default(), retrain_every: 1 }
    }

    fn req(op: Operation, payload: Value) -> ApiRequest {
        ApiRequest::new("r", "agent-1", op, payload)
    }

    fn record(id: &str, v: [u8; 4]) -> Value {
        json!({ "subject_id": id, "locality_id": "L", "values": v, "collected_at": 1 })
    }

    #[test]
    fn enroll_predict_and_alert_flow() {
        let dir = tempfile::tempdir().unwrap();
        let gw = Gateway::new(dir.path(), template()).unwrap();
        assert_eq!(gw.handle(&req(Operation::GetPrediction, json!({"subject_id": "s"}))).error.unwrap().code, "unknown_agent");

        let r = gw.handle(&req(Operation::Enroll, record("s_hi", [1, 1, 1, 0])));
        assert!(r.ok, "{r:?}");
        gw.handle(&req(Operation::Enroll, record("s_lo", [1, 0, 0, 0])));
        assert!(snapshot_path(dir.path(), "agent-1").exists());

        let p = gw.handle(&req(Operation::GetPrediction, json!({"subject_id": "s_lo"})));
        assert_eq!(p.result.unwrap()["score"], json!(0.25));

        let inc = gw.handle(&req(
            Operation::ReportIncident,
            json!({"subject_id": "s_lo", "outcome": "trafficked", "observed_at": 2}),
        ));
        assert!(inc.ok);
        let alerts = gw.handle(&req(Operation::ListAlerts, json!({"since": 0}))).result.unwrap();
        assert_eq!(alerts["alerts"].as_array().unwrap().len(), 1);
        assert_eq!(alerts["alerts"][0]["kind"], "ENTERED_DANGER_ZONE");
        assert_eq!(alerts["next_cursor"], 1);
        let after = gw.handle(&req(Operation::ListAlerts, json!({"since": 1}))).result.unwrap();
        assert!(after["alerts"].as_array().unwrap().is_empty());
        assert_eq!(after["next_cursor"], 1);
    }

    #[test]
    fn errors_name_fields_and_do_not_mutate() {
        let dir = tempfile::tempdir().unwrap();
        let gw = Gateway::new(dir.path(), template()).unwrap();
        let bad = gw.handle(&req(Operation::Enroll, record("s", [1, 2, 0, 0])));
        let e = bad.error.unwrap();
        assert_eq!((e.code.as_str(), e.field.as_deref()), ("range_violation", Some("payload.values.b1")));
        // the failed first mutation created nothing
        assert!(gw.state("agent-1").unwrap().is_none());
        assert!(!snapshot_path(dir.path(), "agent-1").exists());

        let missing = gw.handle(&req(Operation::Enroll, json!({"subject_id": "s"})));
        assert_eq!(missing.error.unwrap().code, "bad_request");
        let typo = gw.handle(&req(Operation::Enroll, json!({"subject_id": "s", "locality_id": "L", "values": "x", "collected_at": 1})));
        assert_eq!(typo.error.unwrap().field.as_deref(), Some("payload.values"));

        gw.handle(&req(Operation::Enroll, record("s", [1, 0, 0, 0])));
        let digest = gw.state("agent-1").unwrap().unwrap().digest();
        let unknown = gw.handle(&req(Operation::ReportIncident, json!({"subject_id": "x", "outcome": "trafficked", "observed_at": 1})));
        assert_eq!(unknown.status(), 404);
        assert_eq!(gw.state("agent-1").unwrap().unwrap().digest(), digest);

        let bad_id = gw.handle(&ApiRequest::new("r", "../etc", Operation::Snapshot, Value::Null));
        assert_eq!(bad_id.error.unwrap().code, "invalid_agent_id");
    }

    #[test]
    fn state_survives_a_new_gateway() {
        let dir = tempfile::tempdir().unwrap();
        let digest = {
            let gw = Gateway::new(dir.path(), template()).unwrap();
            gw.handle(&req(Operation::Enroll, record("s", [1, 0, 1, 0])));
            gw.handle(&req(Operation::ReportIncident, json!({"subject_id": "s", "outcome": "confirmed-safe", "observed_at": 3})));
            gw.state("agent-1").unwrap().unwrap().digest()
        };
        let gw = Gateway::new(dir.path(), template()).unwrap();
        assert_eq!(gw.state("agent-1").unwrap().unwrap().digest(), digest);
    }

    #[test]
    fn snapshot_restore_and_views() {
        let dir = tempfile::tempdir().unwrap();
        let gw = Gateway::new(dir.path(), template()).unwrap();
        for (i, v) in [[1, 0, 0, 0], [1, 1, 0, 0], [0, 0, 1, 1], [0, 1, 1, 1], [1, 0, 0, 1]].iter().enumerate() {
            gw.handle(&req(Operation::Enroll, record(&format!("s{i}"), *v)));
        }
        let snap = gw.handle(&req(Operation::Snapshot, Value::Null)).result.unwrap();
        gw.handle(&req(Operation::Enroll, record("later", [0, 0, 0, 0])));
        let restored = gw.handle(&req(Operation::Restore, json!({"snapshot": snap["snapshot"]})));
        assert_eq!(restored.result.unwrap()["digest"], snap["digest"]);

        let tampered = snap["snapshot"].as_str().unwrap().replacen("\"s1\"", "\"s9\"", 1);
        let e = gw.handle(&req(Operation::Restore, json!({"snapshot": tampered}))).error.unwrap();
        assert_eq!(e.code, "corrupt_snapshot");

        let other = ApiRequest::new("r", "agent-2", Operation::Restore, json!({"snapshot": snap["snapshot"]}));
        assert_eq!(gw.handle(&other).error.unwrap().field.as_deref(), Some("payload.snapshot"));

        let view = gw.handle(&req(Operation::ClusterView, json!({"clusters": 2}))).result.unwrap();
        assert_eq!(view["points"].as_array().unwrap().len(), 5);
        let stats = gw.handle(&req(Operation::SimilarityStats, Value::Null)).result.unwrap();
        assert_eq!(stats["n_records"], 5);
        let peers = gw.handle(&req(Operation::SafetyPeers, json!({"subject_id": "s0", "top_m": 2}))).result.unwrap();
        assert_eq!(peers["peers"].as_array().unwrap().len(), 2);
        let bad_k = gw.handle(&req(Operation::ClusterView, json!({"clusters": 0})));
        assert_eq!(bad_k.error.unwrap().code, "bad_k");
    }
}
