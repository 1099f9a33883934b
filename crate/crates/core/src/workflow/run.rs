//! The coupled and baseline loops, and dataset campaigns.

use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    query_oracle, Arm, CandidateScore, HistoryMatchProblem, RefitRecord, RunEntry, RunLedger, WorkflowConfig,
    WorkflowError,
};
use crate::esmda::{
    run_esmda, AssimilationConfig, EnsembleState, EsmdaLedger, EsmdaManifest, ForwardContext, MemberFailure,
};
use crate::logfeat::{features_from_result, FeatureVector};
use crate::oracle::{
    clean_dataset, logo_cv, train_oracle, Dataset, DatasetRow, DatasetSchema, TrainedOracle,
};
use crate::searchspace::{lhs_sample, oat_plan, to_controls, ConfigSample, SearchSpace};
use crate::simkernel::{run_simulation, SimStatus, SimulationCase, SimulationResult};

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of a (round, realization) pair under a run seed.
pub fn derive_seed(seed: u64, round: u64, realization: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ round) ^ realization)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowManifest {
    pub arm: Arm,
    pub ensemble_seed: u64,
    pub esmda_seed: u64,
    pub alphas: Vec<f64>,
    pub workflow: WorkflowConfig,
    pub n_r: usize,
    pub simulations: usize,
    pub initial_dataset_hash: Option<String>,
    pub refit_dataset_hashes: Vec<String>,
    pub wall_s: f64,
}

#[derive(Debug, Clone)]
pub struct WorkflowOutcome {
    pub final_state: EnsembleState,
    pub ledger: RunLedger,
    pub esmda: EsmdaLedger,
    pub manifest: WorkflowManifest,
}

impl WorkflowOutcome {
    /// Writes the ledger (CSV and JSON), the run manifest and the ES-MDA
    /// matrices into `dir`.
    pub fn save(
        &self,
        dir: &Path,
        problem: &HistoryMatchProblem,
        esmda: &AssimilationConfig,
        space: &SearchSpace,
    ) -> Result<EsmdaManifest, WorkflowError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("ledger.csv"), self.ledger.to_csv(space))?;
        std::fs::write(dir.join("ledger.json"), self.ledger.to_json())?;
        std::fs::write(dir.join("run_manifest.json"), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(self.esmda.save(&dir.join("esmda"), esmda, &problem.prior.names, &problem.obs)?)
    }
}

struct ArmState<'a> {
    arm: Arm,
    problem: &'a HistoryMatchProblem,
    space: &'a SearchSpace,
    cfg: &'a WorkflowConfig,
    initial: Option<&'a Dataset>,
    baseline: ConfigSample,
    pool: rayon::ThreadPool,
    ledger: RunLedger,
    first_elapsed: Vec<f64>,
}

impl ArmState<'_> {
    fn refit(&mut self, round: usize) -> Result<TrainedOracle, WorkflowError> {
        let schema = DatasetSchema::new(FeatureVector::names(), self.space.encoded_names());
        let mut ds = Dataset::new(schema);
        if let Some(init) = self.initial {
            for r in &init.rows {
                ds.push(r.clone())?;
            }
        }
        for r in self.ledger.dataset_rows(self.space)? {
            ds.push(r)?;
        }
        let ds = clean_dataset(&ds)?;
        let seed = derive_seed(self.cfg.seed, round as u64, u64::MAX);
        let grid = &self.cfg.oracle_grid;
        let (oracle, mape, label) = if grid.len() == 1 {
            let c = grid[0];
            let o = self.pool.install(|| train_oracle(c.regressor, c.pipeline, &ds, self.space, seed))?;
            (o, None, c.regressor.label())
        } else {
            let (report, o) = self.pool.install(|| logo_cv(&ds, self.space, grid, self.cfg.refit_metric, seed))?;
            let best = report.best_candidate();
            (o, Some(best.mean_validation.mape), best.candidate.regressor.label())
        };
        self.ledger.refits.push(RefitRecord {
            round,
            training_rows: ds.rows.len(),
            dataset_hash: ds.hash(),
            candidate: label,
            cv_validation_mape: mape,
        });
        Ok(oracle)
    }

    fn step(&mut self, ctx: &ForwardContext, m: &DMatrix<f64>) -> Result<DMatrix<f64>, (usize, WorkflowError)> {
        let round = ctx.round;
        let n_r = self.ledger.n_r;
        let (samples, chosen): (Vec<ConfigSample>, Vec<Option<CandidateScore>>) =
            if self.arm == Arm::Tuned && round > 1 {
                let oracle = self.refit(round).map_err(|e| (0, e))?;
                let prev = self.ledger.round(round - 1);
                let (space, cfg) = (self.space, self.cfg);
                let picks: Vec<Result<CandidateScore, (usize, WorkflowError)>> = self.pool.install(|| {
                    (0..n_r)
                        .into_par_iter()
                        .map(|j| {
                            let seed = derive_seed(cfg.seed, round as u64, j as u64);
                            query_oracle(&oracle, &prev[j].features, space, cfg.query_size, seed, &cfg.wet)
                                .map(|q| q.best)
                                .map_err(|e| (j, e))
                        })
                        .collect()
                });
                let picks = picks.into_iter().collect::<Result<Vec<_>, _>>()?;
                (picks.iter().map(|c| c.sample.clone()).collect(), picks.into_iter().map(Some).collect())
            } else {
                (vec![self.baseline.clone(); n_r], vec![None; n_r])
            };
        let mut cases = Vec::with_capacity(n_r);
        let mut timeouts = Vec::with_capacity(n_r);
        for (j, s) in samples.iter().enumerate() {
            let controls = to_controls(s, &self.problem.template.controls).map_err(|e| (j, e.into()))?;
            let col: Vec<f64> = m.column(j).iter().copied().collect();
            cases.push(self.problem.case_for(&col, &controls));
            timeouts.push(if round == 1 {
                self.cfg.first_round_timeout_s
            } else {
                Some(self.cfg.timeout_factor * self.first_elapsed[j])
            });
        }
        let results: Vec<_> = self.pool.install(|| {
            cases
                .par_iter()
                .zip(&timeouts)
                .map(|(c, t)| run_simulation(c, t.unwrap_or(f64::INFINITY)))
                .collect()
        });
        let nd = self.problem.obs.len();
        let mut d = DMatrix::zeros(nd, n_r);
        let mut entries = Vec::with_capacity(n_r);
        for (j, (r, sample)) in results.into_iter().zip(samples).enumerate() {
            let r = r.map_err(|e| (j, e.into()))?;
            if r.status != SimStatus::Normal {
                return Err((
                    j,
                    WorkflowError::Simulation {
                        round,
                        realization: j,
                        status: r.status,
                        message: r.message.clone().unwrap_or_default(),
                    },
                ));
            }
            let features = features_from_result(&r, &cases[j]).map_err(|e| (j, e.into()))?;
            let reference_features =
                if round == 1 { features.clone() } else { self.ledger.round(round - 1)[j].features.clone() };
            let col = self.problem.simulated_data(&r).map_err(|e| (j, e))?;
            d.set_column(j, &nalgebra::DVector::from_vec(col));
            entries.push(entry(round, j, ctx.forecast, sample, &r, timeouts[j], features, reference_features, chosen[j].clone()));
        }
        if round == 1 {
            self.first_elapsed = entries.iter().map(|e| e.elapsed_s).collect();
        }
        self.ledger.push_round(entries).map_err(|e| (0, e))?;
        Ok(d)
    }
}

#[allow(clippy::too_many_arguments)]
fn entry(
    round: usize,
    realization: usize,
    forecast: bool,
    sample: ConfigSample,
    r: &SimulationResult,
    timeout_s: Option<f64>,
    features: FeatureVector,
    reference_features: FeatureVector,
    chosen: Option<CandidateScore>,
) -> RunEntry {
    RunEntry {
        round,
        realization,
        forecast,
        sample,
        status: r.status,
        elapsed_s: r.elapsed_s,
        wall_s: r.wall_s,
        timeout_s,
        mbe: r.mbe,
        mean_abs_mbe: r.mbe.mean_abs(),
        counters: r.counters,
        features,
        reference_features,
        chosen,
    }
}

fn run_arm(
    arm: Arm,
    problem: &HistoryMatchProblem,
    esmda: &AssimilationConfig,
    cfg: &WorkflowConfig,
    initial: Option<&Dataset>,
    space: &SearchSpace,
) -> Result<WorkflowOutcome, WorkflowError> {
    let started = std::time::Instant::now();
    cfg.validate(space)?;
    problem.template.validate()?;
    let n_r = problem.members();
    let needed = (esmda.rounds() + 1) * n_r;
    if let Some(budget) = cfg.budget {
        if budget < needed {
            return Err(WorkflowError::Budget { budget, needed });
        }
    }
    if let Some(ds) = initial {
        if ds.schema.feature_names != FeatureVector::names() || ds.schema.config_names != space.encoded_names() {
            return Err(WorkflowError::Shape("initial dataset columns do not match the features and space".into()));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| WorkflowError::Config(format!("worker pool: {e}")))?;
    let mut st = ArmState {
        arm,
        problem,
        space,
        cfg,
        initial,
        baseline: cfg.baseline_sample(space)?,
        pool,
        ledger: RunLedger::new(arm, n_r),
        first_elapsed: Vec::new(),
    };
    let mut failure = None;
    let res = run_esmda(problem.prior.clone(), &problem.obs, esmda, |ctx, m| {
        st.step(ctx, m).map_err(|(member, e)| {
            let message = e.to_string();
            failure = Some(e);
            MemberFailure { member, message }
        })
    });
    let (final_state, esmda_ledger) = match (res, failure) {
        (Ok(v), _) => v,
        (Err(_), Some(e)) => return Err(e),
        (Err(e), None) => return Err(e.into()),
    };
    let manifest = WorkflowManifest {
        arm,
        ensemble_seed: problem.spec.seed,
        esmda_seed: esmda.seed,
        alphas: esmda.alphas.clone(),
        workflow: cfg.clone(),
        n_r,
        simulations: st.ledger.simulations(),
        initial_dataset_hash: initial.map(Dataset::hash),
        refit_dataset_hashes: st.ledger.refits.iter().map(|r| r.dataset_hash.clone()).collect(),
        wall_s: started.elapsed().as_secs_f64(),
    };
    Ok(WorkflowOutcome { final_state, ledger: st.ledger, esmda: esmda_ledger, manifest })
}

/// ES-MDA in which every round after the first runs each realization with
/// the configuration the refit oracle ranks best for it.
pub fn coupled_run(
    problem: &HistoryMatchProblem,
    esmda: &AssimilationConfig,
    cfg: &WorkflowConfig,
    initial: Option<&Dataset>,
    space: &SearchSpace,
) -> Result<WorkflowOutcome, WorkflowError> {
    run_arm(Arm::Tuned, problem, esmda, cfg, initial, space)
}

/// The same loop with every run on the baseline configuration.
pub fn baseline_run(
    problem: &HistoryMatchProblem,
    esmda: &AssimilationConfig,
    cfg: &WorkflowConfig,
    space: &SearchSpace,
) -> Result<WorkflowOutcome, WorkflowError> {
    run_arm(Arm::Baseline, problem, esmda, cfg, None, space)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CampaignPlan {
    Lhs { n: usize, seed: u64 },
    Oat { levels: usize },
}

impl CampaignPlan {
    pub fn samples(&self, space: &SearchSpace) -> Result<Vec<ConfigSample>, WorkflowError> {
        Ok(match *self {
            CampaignPlan::Lhs { n, seed } => lhs_sample(space, n, seed)?,
            CampaignPlan::Oat { levels } => oat_plan(space, levels)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discard {
    pub group_id: String,
    /// `None` for the reference run of the group.
    pub sample: Option<usize>,
    pub status: SimStatus,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignOutcome {
    /// Every run, including failed ones.
    pub raw: Dataset,
    pub cleaned: Dataset,
    pub discards: Vec<Discard>,
}

/// Runs every plan sample on every case. Each case first runs `reference`;
/// its features describe all rows of that group, and its elapsed time
/// times `timeout_factor` limits the sample runs. Reference runs are not
/// rows.
pub fn run_campaign(
    cases: &[(String, SimulationCase)],
    plan: &CampaignPlan,
    reference: &ConfigSample,
    space: &SearchSpace,
    workers: usize,
    timeout_factor: f64,
) -> Result<CampaignOutcome, WorkflowError> {
    let samples = plan.samples(space)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| WorkflowError::Config(format!("worker pool: {e}")))?;
    let with = |case: &SimulationCase, s: &ConfigSample| -> Result<SimulationCase, WorkflowError> {
        let mut c = case.clone();
        c.controls = to_controls(s, &case.controls)?;
        Ok(c)
    };
    let refs: Vec<Result<(SimulationCase, SimulationResult), WorkflowError>> = pool.install(|| {
        cases
            .par_iter()
            .map(|(_, case)| {
                let c = with(case, reference)?;
                let r = run_simulation(&c, f64::INFINITY)?;
                Ok((c, r))
            })
            .collect()
    });
    let mut discards = Vec::new();
    let mut groups = Vec::new();
    for ((name, case), r) in cases.iter().zip(refs) {
        let (c, r) = r?;
        if r.status != SimStatus::Normal {
            discards.push(Discard {
                group_id: name.clone(),
                sample: None,
                status: r.status,
                message: r.message.clone().unwrap_or_default(),
            });
            continue;
        }
        let features = features_from_result(&r, &c)?;
        groups.push((name.clone(), case, features, r));
    }
    let jobs: Vec<(usize, usize)> =
        (0..groups.len()).flat_map(|g| (0..samples.len()).map(move |s| (g, s))).collect();
    let runs: Vec<Result<SimulationResult, WorkflowError>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(g, s)| {
                let c = with(groups[g].1, &samples[s])?;
                Ok(run_simulation(&c, timeout_factor * groups[g].3.elapsed_s)?)
            })
            .collect()
    });
    let schema = DatasetSchema::new(FeatureVector::names(), space.encoded_names());
    let mut raw = Dataset::new(schema);
    let row = |g: usize, sample: &ConfigSample, r: &SimulationResult| -> Result<DatasetRow, WorkflowError> {
        Ok(DatasetRow {
            group_id: groups[g].0.clone(),
            status: r.status,
            timesteps: r.counters.timesteps,
            features: groups[g].2.flatten(),
            config: crate::searchspace::encode(sample, space)?,
            elapsed_s: r.elapsed_s,
            mbe_o: r.mbe.oil,
            mbe_w: r.mbe.water,
            mbe_g: r.mbe.gas,
        })
    };
    for (&(g, s), r) in jobs.iter().zip(runs) {
        let r = r?;
        if r.status != SimStatus::Normal {
            discards.push(Discard {
                group_id: groups[g].0.clone(),
                sample: Some(s),
                status: r.status,
                message: r.message.clone().unwrap_or_default(),
            });
        }
        raw.push(row(g, &samples[s], &r)?)?;
    }
    let cleaned = clean_dataset(&raw)?;
    Ok(CampaignOutcome { raw, cleaned, discards })
}
