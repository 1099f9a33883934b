//! Project configuration document.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use simtune::esmda::AssimilationConfig;
use simtune::oracle::{CvCandidate, PipelineSpec, RefitMetric, RegressorSpec};
use simtune::searchspace::ConfigSample;
use simtune::workflow::{CampaignPlan, EnsembleSpec, WorkflowConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub workdir: PathBuf,
    /// Cleaned campaign dataset, relative to `workdir` unless absolute.
    pub dataset: PathBuf,
    /// Trained oracle, relative to `workdir` unless absolute.
    pub oracle: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { workdir: PathBuf::from("."), dataset: PathBuf::from("dataset.csv"), oracle: PathBuf::from("oracle.json") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignSpec {
    /// Seed of the campaign ensemble, distinct from the history-matched one.
    pub ensemble_seed: u64,
    pub n_r: usize,
    pub plan: CampaignPlan,
    /// Configuration of the reference run of each model; defaults when absent.
    pub reference: Option<ConfigSample>,
    pub timeout_factor: f64,
}

impl Default for CampaignSpec {
    fn default() -> Self {
        Self { ensemble_seed: 1001, n_r: 8, plan: CampaignPlan::Lhs { n: 40, seed: 1 }, reference: None, timeout_factor: 2.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridPreset {
    /// Every regressor and pipeline combination.
    Full,
    /// The workflow's configured candidates.
    Workflow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub grid: GridPreset,
    /// Used instead of the preset when non-empty.
    pub candidates: Vec<CvCandidate>,
    pub refit_metric: RefitMetric,
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self { grid: GridPreset::Workflow, candidates: Vec::new(), refit_metric: RefitMetric::Mape, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectConfig {
    pub paths: Paths,
    pub ensemble: EnsembleSpec,
    pub campaign: CampaignSpec,
    pub esmda: AssimilationConfig,
    pub workflow: WorkflowConfig,
    pub train: TrainSpec,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            ensemble: EnsembleSpec::default(),
            campaign: CampaignSpec::default(),
            esmda: AssimilationConfig::uniform(4, 0),
            workflow: WorkflowConfig::default(),
            train: TrainSpec::default(),
        }
    }
}

impl ProjectConfig {
    /// Reads the document and resolves paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: ProjectConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.paths.workdir.is_relative() {
            cfg.paths.workdir = base.join(&cfg.paths.workdir);
        }
        for p in [&mut cfg.paths.dataset, &mut cfg.paths.oracle] {
            if p.is_relative() {
                *p = cfg.paths.workdir.join(&*p);
            }
        }
        let parent = cfg.paths.workdir.parent().unwrap_or(Path::new("."));
        if !parent.as_os_str().is_empty() && !parent.exists() {
            bail!("workdir parent {} does not exist", parent.display());
        }
        cfg.ensemble.validate()?;
        Ok(cfg)
    }

    pub fn grid(&self) -> Vec<CvCandidate> {
        if !self.train.candidates.is_empty() {
            return self.train.candidates.clone();
        }
        match self.train.grid {
            GridPreset::Workflow => self.workflow.oracle_grid.clone(),
            GridPreset::Full => CvCandidate::grid(&RegressorSpec::full_grid(), &PipelineSpec::grid()),
        }
    }
}
