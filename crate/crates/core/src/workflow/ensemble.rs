//! Synthetic geological ensembles and their history-matching problem.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::WorkflowError;
use crate::esmda::{EnsembleState, ObservationSet};
use crate::simkernel::{
    run_simulation, FluidModel, GridModel, NumericalControls, ScheduleInterval, SimStatus, SimulationCase,
    SimulationResult, WellControl, WellKind, WellSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TruthSource {
    /// An extra field drawn after the ensemble members.
    HeldOut,
    Member { index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleSpec {
    pub seed: u64,
    pub n_r: usize,
    pub nx: usize,
    pub ny: usize,
    /// Cell size in x, y, z (m).
    pub cell_size: [f64; 3],
    pub log_perm_mean: f64,
    pub log_perm_std: f64,
    /// Half-width in cells of the moving-average smoothing window.
    pub corr_length: usize,
    /// perm_y / perm_x.
    pub perm_ratio: f64,
    pub poro_base: f64,
    pub poro_slope: f64,
    pub truth: TruthSource,
    /// Observation noise standard deviation relative to the value.
    pub noise_level: f64,
    /// Lower bound of the observation noise standard deviation.
    pub noise_floor: f64,
    pub horizon_days: f64,
    pub report_interval_days: f64,
    pub injection_rate: f64,
    pub producer_bhp: f64,
    pub initial_pressure: f64,
    pub initial_sw: f64,
    pub well_index: f64,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            n_r: 20,
            nx: 15,
            ny: 15,
            cell_size: [20.0, 20.0, 10.0],
            log_perm_mean: 4.6,
            log_perm_std: 0.8,
            corr_length: 2,
            perm_ratio: 0.5,
            poro_base: 0.15,
            poro_slope: 0.02,
            truth: TruthSource::HeldOut,
            noise_level: 0.05,
            noise_floor: 1.0,
            horizon_days: 100.0,
            report_interval_days: 10.0,
            injection_rate: 60.0,
            producer_bhp: 200.0,
            initial_pressure: 250.0,
            initial_sw: 0.15,
            well_index: 50.0,
        }
    }
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<(), WorkflowError> {
        let mut errs = Vec::new();
        if self.n_r < 2 {
            errs.push(format!("n_r = {} (need at least 2)", self.n_r));
        }
        if self.nx < 2 || self.ny < 2 {
            errs.push(format!("grid {}x{} (need at least 2x2)", self.nx, self.ny));
        }
        if !(self.log_perm_std >= 0.0) {
            errs.push("log_perm_std must be non-negative".into());
        }
        if !(self.noise_level >= 0.0 && self.noise_floor > 0.0) {
            errs.push("noise_level must be >= 0 and noise_floor > 0".into());
        }
        if let TruthSource::Member { index } = self.truth {
            if index >= self.n_r {
                errs.push(format!("truth index {index} outside an ensemble of {}", self.n_r));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(WorkflowError::Config(errs.join("; ")))
        }
    }
}

/// Maps a log-permeability vector onto grid properties.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropertyMap {
    pub log_perm_mean: f64,
    pub perm_ratio: f64,
    pub poro_base: f64,
    pub poro_slope: f64,
    pub log_perm_min: f64,
    pub log_perm_max: f64,
}

impl PropertyMap {
    pub fn from_spec(spec: &EnsembleSpec) -> Self {
        Self {
            log_perm_mean: spec.log_perm_mean,
            perm_ratio: spec.perm_ratio,
            poro_base: spec.poro_base,
            poro_slope: spec.poro_slope,
            log_perm_min: (0.1f64).ln(),
            log_perm_max: (1.0e4f64).ln(),
        }
    }

    pub fn apply(&self, grid: &mut GridModel, log_perm: &[f64]) {
        for (c, &v) in log_perm.iter().enumerate() {
            let lnk = v.clamp(self.log_perm_min, self.log_perm_max);
            grid.perm_x[c] = lnk.exp();
            grid.perm_y[c] = self.perm_ratio * lnk.exp();
            grid.porosity[c] = (self.poro_base + self.poro_slope * (lnk - self.log_perm_mean)).clamp(0.05, 0.35);
        }
    }
}

/// Unit-variance Gaussian field smoothed by a square moving average of
/// half-width `half`.
fn smoothed_field(nx: usize, ny: usize, half: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (px, py) = (nx + 2 * half, ny + 2 * half);
    let white: Vec<f64> = (0..px * py).map(|_| rng.sample(StandardNormal)).collect();
    let w = 2 * half + 1;
    let norm = ((w * w) as f64).sqrt();
    let mut out = vec![0.0; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            let mut s = 0.0;
            for b in 0..w {
                for a in 0..w {
                    s += white[(j + b) * px + i + a];
                }
            }
            out[j * nx + i] = s / norm;
        }
    }
    out
}

/// Prior ensemble, observations and the case template of a synthetic
/// history-matching study. Parameters are per-cell log-permeabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryMatchProblem {
    pub spec: EnsembleSpec,
    pub template: SimulationCase,
    pub map: PropertyMap,
    pub prior: EnsembleState,
    pub truth: Vec<f64>,
    pub obs: ObservationSet,
    /// Curves matched, each at every report after day 0.
    pub observed: Vec<String>,
}

fn template_case(spec: &EnsembleSpec) -> SimulationCase {
    let (nx, ny) = (spec.nx, spec.ny);
    let grid = GridModel::uniform(nx, ny, spec.cell_size, spec.log_perm_mean.exp(), spec.poro_base);
    let h = spec.horizon_days;
    let well = |name: &str, cell: usize, kind: WellKind, control: WellControl| WellSpec {
        name: name.into(),
        cell,
        kind,
        well_index: spec.well_index,
        schedule: vec![ScheduleInterval { start_day: 0.0, end_day: h, control }],
    };
    let wells = vec![
        well("INJ", grid.cell_index(0, 0), WellKind::Injector, WellControl::Rate(spec.injection_rate)),
        well("PROD1", grid.cell_index(nx - 1, ny - 1), WellKind::Producer, WellControl::Bhp(spec.producer_bhp)),
        well("PROD2", grid.cell_index(nx - 1, 0), WellKind::Producer, WellControl::Bhp(spec.producer_bhp)),
    ];
    let n = nx * ny;
    SimulationCase {
        grid,
        fluid: FluidModel::default(),
        wells,
        controls: NumericalControls::default(),
        horizon_days: h,
        report_interval_days: spec.report_interval_days,
        initial_pressure: vec![spec.initial_pressure; n],
        initial_sw: vec![spec.initial_sw; n],
    }
}

/// Draws the prior ensemble and the truth, simulates the truth with the
/// default controls and perturbs its curves into observations.
pub fn generate_problem(spec: &EnsembleSpec) -> Result<HistoryMatchProblem, WorkflowError> {
    spec.validate()?;
    let template = template_case(spec);
    template.validate()?;
    let n = spec.nx * spec.ny;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut draw = || -> Vec<f64> {
        smoothed_field(spec.nx, spec.ny, spec.corr_length, &mut rng)
            .into_iter()
            .map(|z| spec.log_perm_mean + spec.log_perm_std * z)
            .collect()
    };
    let members: Vec<Vec<f64>> = (0..spec.n_r).map(|_| draw()).collect();
    let truth = match spec.truth {
        TruthSource::HeldOut => draw(),
        TruthSource::Member { index } => members[index].clone(),
    };
    let m = DMatrix::from_fn(n, spec.n_r, |i, j| members[j][i]);
    let names = (0..n).map(|c| format!("lnk_{}_{}", c % spec.nx, c / spec.nx)).collect();
    let prior = EnsembleState::new(m, names)?;
    let observed: Vec<String> =
        template.wells.iter().filter(|w| w.kind == WellKind::Producer).flat_map(|w| {
            [format!("{}_OPT", w.name), format!("{}_WPT", w.name)]
        }).collect();
    let mut problem = HistoryMatchProblem {
        spec: spec.clone(),
        template,
        map: PropertyMap::from_spec(spec),
        prior,
        truth,
        obs: ObservationSet { d_obs: vec![], variances: vec![], labels: vec![] },
        observed,
    };
    let truth_case = problem.case_for(&problem.truth, &NumericalControls::default());
    let result = run_simulation(&truth_case, f64::INFINITY)?;
    if result.status != SimStatus::Normal {
        return Err(WorkflowError::Config(format!(
            "truth simulation ended {:?}: {}",
            result.status,
            result.message.clone().unwrap_or_default()
        )));
    }
    let d = problem.simulated_data(&result)?;
    let mut noise = ChaCha8Rng::seed_from_u64(spec.seed);
    noise.set_stream(1);
    let mut obs = ObservationSet { d_obs: Vec::new(), variances: Vec::new(), labels: problem.labels(&result) };
    for v in d {
        let sd = (spec.noise_level * v.abs()).max(spec.noise_floor);
        let e: f64 = noise.sample(StandardNormal);
        obs.d_obs.push(v + sd * e);
        obs.variances.push(sd * sd);
    }
    obs.validate()?;
    problem.obs = obs;
    Ok(problem)
}

impl HistoryMatchProblem {
    pub fn members(&self) -> usize {
        self.prior.members()
    }

    pub fn case_for(&self, log_perm: &[f64], controls: &NumericalControls) -> SimulationCase {
        let mut case = self.template.clone();
        self.map.apply(&mut case.grid, log_perm);
        case.controls = controls.clone();
        case
    }

    /// Cases of the prior members with the template controls.
    pub fn prior_cases(&self) -> Vec<SimulationCase> {
        (0..self.members())
            .map(|j| {
                let col: Vec<f64> = self.prior.m.column(j).iter().copied().collect();
                self.case_for(&col, &self.template.controls)
            })
            .collect()
    }

    fn labels(&self, result: &SimulationResult) -> Vec<String> {
        let mut out = Vec::new();
        for name in &self.observed {
            for d in result.curves.days.iter().skip(1) {
                out.push(format!("{name}@{d}"));
            }
        }
        out
    }

    /// Observed curves of a completed run, concatenated in `observed` order.
    pub fn simulated_data(&self, result: &SimulationResult) -> Result<Vec<f64>, WorkflowError> {
        let mut out = Vec::new();
        for name in &self.observed {
            let v = result
                .curves
                .get(name)
                .ok_or_else(|| WorkflowError::Shape(format!("run has no curve {name}")))?;
            out.extend(v.iter().skip(1));
        }
        Ok(out)
    }
}
