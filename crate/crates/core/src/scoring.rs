//! Vulnerability scoring.
//!
//! Three pieces: a convex heuristic scorer usable from day one, a logistic
//! model trained online by SGD as incidents are reported, and a label-count
//! schedule that hands authority from the first to the second.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const CONVEXITY_TOL: f64 = 1e-9;

/// Convex weight vector plus danger-zone threshold.
///
/// The threshold doubles as the classification boundary of blended scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawHeuristic")]
pub struct HeuristicModel {
    weights: Vec<f64>,
    theta: f64,
}

#[derive(Deserialize)]
struct RawHeuristic {
    weights: Vec<f64>,
    theta: f64,
}

impl TryFrom<RawHeuristic> for HeuristicModel {
    type Error = Error;

    fn try_from(raw: RawHeuristic) -> Result<Self> {
        HeuristicModel::new(raw.weights, raw.theta)
    }
}

impl HeuristicModel {
    pub fn new(weights: Vec<f64>, theta: f64) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidModel("heuristic needs at least one weight".into()));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::InvalidModel(format!("heuristic weight {w} is negative or not finite")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > CONVEXITY_TOL {
            return Err(Error::InvalidModel(format!("heuristic weights sum to {sum}, expected 1")));
        }
        if !(theta > 0.0 && theta < 1.0) {
            return Err(Error::InvalidModel(format!("threshold {theta} must lie strictly inside (0, 1)")));
        }
        Ok(HeuristicModel { weights, theta })
    }

    /// Uniform weights `1/d` with threshold 0.5.
    pub fn uniform(dim: usize) -> Self {
        HeuristicModel::new(vec![1.0 / dim as f64; dim], 0.5).expect("uniform heuristic is valid")
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }
}

/// Logistic discriminant `σ(c·x + b)` with version lineage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedModel {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub version: u64,
    pub trained_on: usize,
}

impl LearnedModel {
    pub fn zeros(dim: usize) -> Self {
        LearnedModel { coefficients: vec![0.0; dim], intercept: 0.0, version: 0, trained_on: 0 }
    }

    pub fn dim(&self) -> usize {
        self.coefficients.len()
    }

    pub fn logit(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(dot(&self.coefficients, x) + self.intercept)
    }

    pub fn probability(&self, x: &[f64]) -> Result<f64> {
        self.logit(x).map(sigmoid)
    }

    /// Indices of the `k` largest coefficients by magnitude, ties by index.
    pub fn top_features(&self, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.dim()).collect();
        idx.sort_by(|&a, &b| {
            self.coefficients[b].abs().total_cmp(&self.coefficients[a].abs()).then(a.cmp(&b))
        });
        idx.truncate(k);
        idx
    }
}

/// Label-count ramp from heuristic to learned authority.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPolicy")]
pub struct BlendPolicy {
    pub floor_labels: usize,
    pub n0: usize,
}

#[derive(Deserialize)]
struct RawPolicy {
    floor_labels: usize,
    n0: usize,
}

impl TryFrom<RawPolicy> for BlendPolicy {
    type Error = Error;

    fn try_from(raw: RawPolicy) -> Result<Self> {
        BlendPolicy::new(raw.floor_labels, raw.n0)
    }
}

impl Default for BlendPolicy {
    fn default() -> Self {
        BlendPolicy { floor_labels: 5, n0: 50 }
    }
}

impl BlendPolicy {
    pub fn new(floor_labels: usize, n0: usize) -> Result<Self> {
        if n0 == 0 || floor_labels >= n0 {
            return Err(Error::InvalidModel(format!(
                "blend policy needs 0 <= floor_labels < n0, got floor={floor_labels} n0={n0}"
            )));
        }
        Ok(BlendPolicy { floor_labels, n0 })
    }

    /// Learned-model weight for a model trained on `trained_on` labels.
    pub fn alpha(&self, trained_on: usize) -> f64 {
        if trained_on <= self.floor_labels {
            0.0
        } else if trained_on >= self.n0 {
            1.0
        } else {
            (trained_on - self.floor_labels) as f64 / (self.n0 - self.floor_labels) as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub subject_id: String,
    pub score: f64,
    pub vulnerable: bool,
    pub alpha: f64,
    pub model_version: u64,
}

/// One encoded training example; `target` is 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub features: Vec<f64>,
    pub target: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Weight examples by inverse class frequency.
    pub class_balance: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 50, learning_rate: 0.1, seed: 0, class_balance: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrainOutcome {
    pub model: LearnedModel,
    /// All examples carried the same label.
    pub degenerate_single_class: bool,
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

pub fn score_heuristic(x: &[f64], model: &HeuristicModel) -> Result<f64> {
    check_dim(model.dim(), x.len())?;
    Ok(dot(&model.weights, x).clamp(0.0, 1.0))
}

/// One log-loss gradient step on a single example.
pub fn sgd_update(model: &LearnedModel, x: &[f64], y: f64, lr: f64) -> Result<LearnedModel> {
    let mut next = model.clone();
    sgd_step(&mut next, x, y, lr)?;
    Ok(next)
}

fn sgd_step(model: &mut LearnedModel, x: &[f64], y: f64, step: f64) -> Result<()> {
    let residual = model.probability(x)? - y;
    for (c, xi) in model.coefficients.iter_mut().zip(x) {
        *c -= step * residual * xi;
    }
    model.intercept -= step * residual;
    Ok(())
}

/// Shuffled multi-epoch SGD starting from `model`.
///
/// Deterministic for fixed arguments: the shuffle stream is drawn from
/// `config.seed`. The returned model carries `version + 1`.
pub fn retrain(model: &LearnedModel, data: &[LabeledExample], config: &TrainConfig) -> Result<RetrainOutcome> {
    if data.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    if config.epochs == 0 || config.learning_rate.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::BadConfig("retrain needs epochs > 0 and learning_rate > 0".into()));
    }
    for ex in data {
        check_dim(model.dim(), ex.features.len())?;
        if ex.target != 0.0 && ex.target != 1.0 {
            return Err(Error::BadConfig(format!("training target {} is not 0 or 1", ex.target)));
        }
    }

    let positives = data.iter().filter(|e| e.target == 1.0).count();
    let negatives = data.len() - positives;
    let degenerate = positives == 0 || negatives == 0;
    let class_weight = |target: f64| -> f64 {
        if !config.class_balance || degenerate {
            return 1.0;
        }
        let n_c = if target == 1.0 { positives } else { negatives };
        data.len() as f64 / (2.0 * n_c as f64)
    };

    let mut next = model.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let ex = &data[i];
            sgd_step(&mut next, &ex.features, ex.target, config.learning_rate * class_weight(ex.target))?;
        }
    }
    next.version = model.version + 1;
    next.trained_on = data.len();
    Ok(RetrainOutcome { model: next, degenerate_single_class: degenerate })
}

/// Mixes heuristic and learned scores according to `policy`.
pub fn score_blended(
    subject_id: &str,
    x: &[f64],
    heuristic: &HeuristicModel,
    learned: &LearnedModel,
    policy: &BlendPolicy,
) -> Result<Prediction> {
    check_dim(heuristic.dim(), learned.dim())?;
    let h = score_heuristic(x, heuristic)?;
    let p = learned.probability(x)?;
    let alpha = policy.alpha(learned.trained_on);
    let score = if alpha == 0.0 {
        h
    } else if alpha == 1.0 {
        p
    } else {
        ((1.0 - alpha) * h + alpha * p).clamp(0.0, 1.0)
    };
    Ok(Prediction {
        subject_id: subject_id.to_string(),
        score,
        vulnerable: score >= heuristic.theta,
        alpha,
        model_version: learned.version,
    })
}

/// Model file: `{heuristic, learned, policy}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub heuristic: HeuristicModel,
    pub learned: LearnedModel,
    pub policy: BlendPolicy,
}

impl ModelFile {
    pub fn default_for(dim: usize) -> Self {
        ModelFile { heuristic: HeuristicModel::uniform(dim), learned: LearnedModel::zeros(dim), policy: BlendPolicy::default() }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::InvalidModel(e.to_string()))?;
        check_dim(file.heuristic.dim(), file.learned.dim())?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
