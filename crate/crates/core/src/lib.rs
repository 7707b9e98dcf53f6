//! Decision-support core for outreach field agents.
//!
//! Scores subjects for vulnerability, retrains a per-agent model as incidents
//! are reported, raises alerts when subjects enter the danger zone, and
//! audits survey data structurally.

pub mod analytics;
pub mod cohortgen;
pub mod engine;
pub mod error;
pub mod schema;
pub mod scoring;
pub mod syncsim;

pub use error::{Error, Result};
pub use schema::{Dataset, FeatureDef, FeatureKind, FeatureSchema, IncidentLabel, Outcome, SurveyRecord};
pub use scoring::{BlendPolicy, HeuristicModel, LearnedModel, Prediction, TrainConfig};
