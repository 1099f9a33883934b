//! Coupled history-matching and tuning loop: every ES-MDA round simulates
//! the ensemble, and from the second round on each realization runs with the
//! numerical controls the performance oracle ranks best for it.

mod ensemble;
mod ledger;
mod run;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ensemble::{generate_problem, EnsembleSpec, HistoryMatchProblem, PropertyMap, TruthSource};
pub use ledger::{
    speedup_report, Arm, RefitRecord, RoundSummary, RunEntry, RunLedger, SpeedupReport, HISTOGRAM_BINS,
};
pub use run::{
    baseline_run, coupled_run, derive_seed, run_campaign, CampaignOutcome, CampaignPlan, WorkflowManifest,
    WorkflowOutcome,
};

use crate::esmda::EsmdaError;
use crate::logfeat::{FeatureVector, LogError};
use crate::oracle::{
    CvCandidate, MaxFeatures, OracleError, PipelineSpec, RefitMetric, RegressorSpec, Scaler, TrainedOracle,
};
use crate::searchspace::{lhs_sample, validate, ConfigSample, SearchError, SearchSpace};
use crate::simkernel::{SimError, SimStatus};

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error("invalid workflow configuration: {0}")]
    Config(String),
    #[error("simulation of realization {realization} in round {round} ended {status:?}: {message}")]
    Simulation { round: usize, realization: usize, status: SimStatus, message: String },
    #[error("ledger shapes differ: {0}")]
    Shape(String),
    #[error("simulation budget of {budget} runs is below the {needed} the schedule needs")]
    Budget { budget: usize, needed: usize },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Esmda(#[from] EsmdaError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Elapsed-time penalty bands keyed on the mean absolute material balance
/// error (percent).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WetPolicy {
    pub t1: f64,
    pub t2: f64,
    pub penalty_mid: f64,
    pub penalty_high: f64,
}

impl Default for WetPolicy {
    fn default() -> Self {
        Self { t1: 0.05, t2: 0.10, penalty_mid: 2.0, penalty_high: 1000.0 }
    }
}

impl WetPolicy {
    pub fn validate(&self) -> Result<(), WorkflowError> {
        if !(self.t1 > 0.0 && self.t1 < self.t2) {
            return Err(WorkflowError::Config(format!("need 0 < t1 < t2, got {} and {}", self.t1, self.t2)));
        }
        if !(self.penalty_mid >= 1.0 && self.penalty_high >= self.penalty_mid) {
            return Err(WorkflowError::Config("penalties must satisfy 1 <= mid <= high".into()));
        }
        Ok(())
    }

    /// 0, 1 or 2 for the low, middle and high band.
    pub fn band(&self, mean_abs_mbe: f64) -> usize {
        if mean_abs_mbe <= self.t1 {
            0
        } else if mean_abs_mbe <= self.t2 {
            1
        } else {
            2
        }
    }

    pub fn wet(&self, elapsed_s: f64, mean_abs_mbe: f64) -> f64 {
        match self.band(mean_abs_mbe) {
            0 => elapsed_s,
            1 => elapsed_s * self.penalty_mid,
            _ => elapsed_s * self.penalty_high,
        }
    }
}

/// Weighted elapsed time with the default bands.
pub fn weighted_elapsed_time(elapsed_s: f64, mean_abs_mbe: f64) -> f64 {
    WetPolicy::default().wet(elapsed_s, mean_abs_mbe)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub sample: ConfigSample,
    pub elapsed_s: f64,
    pub mean_abs_mbe: f64,
    pub wet: f64,
}

/// Anything that predicts `(elapsed_s, mean_abs_mbe)` for a batch of
/// configurations of one model.
pub trait PerformanceModel {
    fn predict_batch(&self, features: &FeatureVector, samples: &[ConfigSample])
        -> Result<Vec<(f64, f64)>, OracleError>;
}

impl PerformanceModel for TrainedOracle {
    fn predict_batch(
        &self,
        features: &FeatureVector,
        samples: &[ConfigSample],
    ) -> Result<Vec<(f64, f64)>, OracleError> {
        TrainedOracle::predict_batch(self, features, samples)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub best: CandidateScore,
    pub best_index: usize,
    pub candidates: usize,
    /// Candidates per WET band.
    pub band_counts: [usize; 3],
    pub min_wet: f64,
    pub max_wet: f64,
}

/// Orders `a` before `b` by WET, then predicted quality, then index.
fn better(a: (f64, f64, usize), b: (f64, f64, usize)) -> bool {
    a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)).is_lt()
}

/// Candidate indices from best to worst under the query tie-break rules.
pub fn rank_candidates(predictions: &[(f64, f64)], policy: &WetPolicy) -> Vec<usize> {
    let key: Vec<(f64, f64)> = predictions.iter().map(|&(et, q)| (policy.wet(et, q), q)).collect();
    let mut idx: Vec<usize> = (0..predictions.len()).collect();
    idx.sort_by(|&a, &b| key[a].0.total_cmp(&key[b].0).then(key[a].1.total_cmp(&key[b].1)).then(a.cmp(&b)));
    idx
}

/// Draws `query_size` candidates by LHS, predicts them all and returns the
/// one of least WET.
pub fn query_oracle<M: PerformanceModel + ?Sized>(
    model: &M,
    features: &FeatureVector,
    space: &SearchSpace,
    query_size: usize,
    seed: u64,
    policy: &WetPolicy,
) -> Result<QueryOutcome, WorkflowError> {
    let samples = lhs_sample(space, query_size, seed)?;
    let preds = model.predict_batch(features, &samples)?;
    if preds.len() != samples.len() {
        return Err(WorkflowError::Shape(format!("{} predictions for {} candidates", preds.len(), samples.len())));
    }
    let mut band_counts = [0; 3];
    let (mut min_wet, mut max_wet) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut best = (f64::INFINITY, f64::INFINITY, usize::MAX);
    for (i, &(et, q)) in preds.iter().enumerate() {
        let w = policy.wet(et, q);
        band_counts[policy.band(q)] += 1;
        min_wet = min_wet.min(w);
        max_wet = max_wet.max(w);
        if best.2 == usize::MAX || better((w, q, i), best) {
            best = (w, q, i);
        }
    }
    let i = best.2;
    let sample = samples[i].clone();
    validate(&sample, space).map_err(SearchError::Violations)?;
    Ok(QueryOutcome {
        best: CandidateScore { sample, elapsed_s: preds[i].0, mean_abs_mbe: preds[i].1, wet: best.0 },
        best_index: i,
        candidates: samples.len(),
        band_counts,
        min_wet,
        max_wet,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    Default,
    Engineer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkflowConfig {
    pub query_size: usize,
    pub wet: WetPolicy,
    pub baseline: BaselineMode,
    /// Baseline overrides; parameters left out keep their defaults.
    pub engineer: Option<ConfigSample>,
    /// Per-run limit from round 2 on: this factor times the realization's
    /// round-1 elapsed time.
    pub timeout_factor: f64,
    /// Limit for round-1 runs; `None` means no limit.
    pub first_round_timeout_s: Option<f64>,
    pub seed: u64,
    /// One candidate is trained directly; several are selected by LOGO-CV.
    pub oracle_grid: Vec<CvCandidate>,
    pub refit_metric: RefitMetric,
    pub workers: usize,
    /// Upper bound on simulations per arm.
    pub budget: Option<usize>,
}

impl Default for WorkflowConfig {
    fn default() -> Self {
        Self {
            query_size: 10_000,
            wet: WetPolicy::default(),
            baseline: BaselineMode::Default,
            engineer: None,
            timeout_factor: 2.0,
            first_round_timeout_s: None,
            seed: 0,
            oracle_grid: vec![default_candidate()],
            refit_metric: RefitMetric::Mape,
            workers: 1,
            budget: None,
        }
    }
}

/// Random forest of 50 fully grown trees on min-max scaled inputs.
pub fn default_candidate() -> CvCandidate {
    CvCandidate {
        regressor: RegressorSpec::RandomForest { n_estimators: 50, max_depth: None, max_features: MaxFeatures::Sqrt },
        pipeline: PipelineSpec { scaler: Scaler::Rescale01, top_k: 1.0 },
    }
}

impl WorkflowConfig {
    pub fn validate(&self, space: &SearchSpace) -> Result<(), WorkflowError> {
        self.wet.validate()?;
        if self.query_size < 1 {
            return Err(WorkflowError::Config("query_size must be at least 1".into()));
        }
        if self.workers < 1 {
            return Err(WorkflowError::Config("workers must be at least 1".into()));
        }
        if !(self.timeout_factor > 0.0) {
            return Err(WorkflowError::Config("timeout_factor must be positive".into()));
        }
        if self.oracle_grid.is_empty() {
            return Err(WorkflowError::Config("oracle grid is empty".into()));
        }
        if self.baseline == BaselineMode::Engineer && self.engineer.is_none() {
            return Err(WorkflowError::Config("engineer baseline selected without an engineer sample".into()));
        }
        self.baseline_sample(space).map(|_| ())
    }

    /// The configuration every round-1 run uses.
    pub fn baseline_sample(&self, space: &SearchSpace) -> Result<ConfigSample, WorkflowError> {
        let s = match (self.baseline, &self.engineer) {
            (BaselineMode::Engineer, Some(e)) => {
                let mut s = space.defaults();
                s.values.extend(e.values.clone());
                s
            }
            (BaselineMode::Engineer, None) => {
                return Err(WorkflowError::Config("engineer baseline selected without an engineer sample".into()))
            }
            (BaselineMode::Default, _) => space.defaults(),
        };
        validate(&s, space).map_err(SearchError::Violations)?;
        Ok(s)
    }
}
