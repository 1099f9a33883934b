//! Ensemble smoother with multiple data assimilation.
//!
//! Each round runs the forward model on every member, perturbs the observed
//! data with inflated noise, and moves the parameters with a Kalman-type
//! gain built from ensemble covariances. A final forward run produces the
//! forecast.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_SVD_TOL: f64 = 1e-8;
const ALPHA_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EsmdaError {
    #[error("inflation factors invalid: {0}")]
    Alphas(String),
    #[error("ensemble needs at least 2 members, got {0}")]
    TooFewMembers(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("invalid observations: {0}")]
    Observations(String),
    #[error("forward model failed in round {round} for member {member}: {message}")]
    Forward { round: usize, member: usize, message: String },
    #[error("ledger write failed: {0}")]
    Io(String),
}

/// Forward-model failure attributed to one ensemble member.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberFailure {
    pub member: usize,
    pub message: String,
}

/// Parameter matrix, one column per ensemble member.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    pub m: DMatrix<f64>,
    pub names: Vec<String>,
    /// Completed assimilation rounds.
    pub iteration: usize,
}

impl EnsembleState {
    pub fn new(m: DMatrix<f64>, names: Vec<String>) -> Result<Self, EsmdaError> {
        if m.ncols() < 2 {
            return Err(EsmdaError::TooFewMembers(m.ncols()));
        }
        if names.len() != m.nrows() {
            return Err(EsmdaError::Shape(format!("{} names for {} parameters", names.len(), m.nrows())));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(EsmdaError::NonFinite("ensemble"));
        }
        Ok(Self { m, names, iteration: 0 })
    }

    pub fn members(&self) -> usize {
        self.m.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    pub d_obs: Vec<f64>,
    /// Diagonal of the observation error covariance.
    pub variances: Vec<f64>,
    pub labels: Vec<String>,
}

impl ObservationSet {
    pub fn validate(&self) -> Result<(), EsmdaError> {
        let n = self.d_obs.len();
        if n == 0 {
            return Err(EsmdaError::Observations("no observations".into()));
        }
        if self.variances.len() != n || self.labels.len() != n {
            return Err(EsmdaError::Observations("values, variances and labels differ in length".into()));
        }
        if let Some(i) = self.variances.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(EsmdaError::Observations(format!("variance of {} is not positive", self.labels[i])));
        }
        if self.d_obs.iter().any(|v| !v.is_finite()) {
            return Err(EsmdaError::NonFinite("observations"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.d_obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_obs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssimilationConfig {
    pub alphas: Vec<f64>,
    pub seed: u64,
    pub svd_tol: f64,
}

impl AssimilationConfig {
    /// `n_a` rounds with every inflation factor equal to `n_a`.
    pub fn uniform(n_a: usize, seed: u64) -> Self {
        Self { alphas: vec![n_a as f64; n_a], seed, svd_tol: DEFAULT_SVD_TOL }
    }

    pub fn rounds(&self) -> usize {
        self.alphas.len()
    }
}

/// Accepts iff every factor is positive and their reciprocals sum to one.
pub fn validate_alphas(alphas: &[f64]) -> Result<(), EsmdaError> {
    if alphas.is_empty() {
        return Err(EsmdaError::Alphas("empty schedule".into()));
    }
    if let Some(a) = alphas.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
        return Err(EsmdaError::Alphas(format!("factor {a} is not positive")));
    }
    let sum: f64 = alphas.iter().map(|a| 1.0 / a).sum();
    let residual = sum - 1.0;
    if residual.abs() > ALPHA_SUM_TOL {
        return Err(EsmdaError::Alphas(format!("sum of reciprocals is {sum} (residual {residual:e})")));
    }
    Ok(())
}

/// Column `j` is `d_obs + sqrt(alpha) * sqrt(C_D) * z_j` with standard normal `z_j`.
pub fn perturb_observations(obs: &ObservationSet, alpha: f64, n_r: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let nd = obs.len();
    let sa = alpha.sqrt();
    let mut out = DMatrix::zeros(nd, n_r);
    for j in 0..n_r {
        for i in 0..nd {
            let z: f64 = StandardNormal.sample(rng);
            out[(i, j)] = obs.d_obs[i] + sa * obs.variances[i].sqrt() * z;
        }
    }
    out
}

fn anomalies(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = x.column_mean();
    let mut a = x.clone();
    for mut col in a.column_iter_mut() {
        col -= &mean;
    }
    a
}

/// Ensemble cross-covariance of parameters and data, and data auto-covariance.
pub fn cross_covariance(m: &DMatrix<f64>, d: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>), EsmdaError> {
    let n_r = m.ncols();
    if d.ncols() != n_r {
        return Err(EsmdaError::Shape(format!("{} parameter columns vs {} data columns", n_r, d.ncols())));
    }
    if n_r < 2 {
        return Err(EsmdaError::TooFewMembers(n_r));
    }
    let am = anomalies(m);
    let ad = anomalies(d);
    let scale = 1.0 / (n_r - 1) as f64;
    Ok((&am * ad.transpose() * scale, &ad * ad.transpose() * scale))
}

/// Truncated-SVD pseudo-inverse, dropping singular values below
/// `rel_tol` times the largest.
pub fn pinv(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let svd = a.clone().svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let mut s_inv = DMatrix::zeros(vt.nrows(), u.ncols());
    for (i, s) in svd.singular_values.iter().enumerate() {
        if *s > 0.0 && *s >= rel_tol * smax {
            s_inv[(i, i)] = 1.0 / s;
        }
    }
    vt.transpose() * s_inv * u.transpose()
}

/// `K = C_MD * pinv(alpha * C_D + C_DD)`.
pub fn kalman_gain(
    c_md: &DMatrix<f64>,
    c_dd: &DMatrix<f64>,
    c_d: &[f64],
    alpha: f64,
    svd_tol: f64,
) -> Result<DMatrix<f64>, EsmdaError> {
    let nd = c_d.len();
    if c_dd.shape() != (nd, nd) || c_md.ncols() != nd {
        return Err(EsmdaError::Shape(format!(
            "C_MD {:?}, C_DD {:?}, C_D length {nd}",
            c_md.shape(),
            c_dd.shape()
        )));
    }
    if c_md.iter().chain(c_dd.iter()).chain(c_d).any(|v| !v.is_finite()) || !alpha.is_finite() {
        return Err(EsmdaError::NonFinite("gain inputs"));
    }
    let mut s = c_dd.clone();
    for i in 0..nd {
        s[(i, i)] += alpha * c_d[i];
    }
    Ok(c_md * pinv(&s, svd_tol))
}

/// Column `j` of the result is `M_j + K (d_uc_j - d_sim_j)`.
pub fn update_ensemble(
    m: &DMatrix<f64>,
    d_sim: &DMatrix<f64>,
    d_uc: &DMatrix<f64>,
    k: &DMatrix<f64>,
) -> Result<DMatrix<f64>, EsmdaError> {
    if d_sim.shape() != d_uc.shape()
        || d_sim.ncols() != m.ncols()
        || k.nrows() != m.nrows()
        || k.ncols() != d_sim.nrows()
    {
        return Err(EsmdaError::Shape(format!(
            "M {:?}, D_sim {:?}, D_uc {:?}, K {:?}",
            m.shape(),
            d_sim.shape(),
            d_uc.shape(),
            k.shape()
        )));
    }
    Ok(m + k * (d_uc - d_sim))
}

/// What the forward model is asked to evaluate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardContext {
    /// 1-based; the forecast is round `N_a + 1`.
    pub round: usize,
    pub forecast: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerRound {
    pub round: usize,
    pub alpha: f64,
    pub m: DMatrix<f64>,
    pub d_sim: DMatrix<f64>,
}

/// Per-round parameter snapshots and simulated data.
#[derive(Debug, Clone, PartialEq)]
pub struct EsmdaLedger {
    pub rounds: Vec<LedgerRound>,
    pub forecast_m: DMatrix<f64>,
    pub forecast_d: DMatrix<f64>,
    pub forward_calls: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EsmdaManifest {
    pub seed: u64,
    pub alphas: Vec<f64>,
    pub svd_tol: f64,
    pub n_params: usize,
    pub n_data: usize,
    pub n_members: usize,
    pub parameter_names: Vec<String>,
    pub observation_labels: Vec<String>,
    pub files: Vec<String>,
}

pub fn matrix_to_csv(m: &DMatrix<f64>, row_names: &[String]) -> String {
    let mut out = String::from("name");
    for j in 0..m.ncols() {
        out.push_str(&format!(",member_{j}"));
    }
    out.push('\n');
    for i in 0..m.nrows() {
        out.push_str(row_names.get(i).map_or("", String::as_str));
        for j in 0..m.ncols() {
            out.push(',');
            out.push_str(&m[(i, j)].to_string());
        }
        out.push('\n');
    }
    out
}

impl EsmdaLedger {
    /// Writes per-round `m`/`d_sim` CSV matrices and `manifest.json` into `dir`.
    pub fn save(
        &self,
        dir: &Path,
        config: &AssimilationConfig,
        names: &[String],
        obs: &ObservationSet,
    ) -> Result<EsmdaManifest, EsmdaError> {
        let io = |e: std::io::Error| EsmdaError::Io(e.to_string());
        fs::create_dir_all(dir).map_err(io)?;
        let mut files = Vec::new();
        let mut put = |name: String, text: String| -> Result<(), EsmdaError> {
            fs::write(dir.join(&name), text).map_err(io)?;
            files.push(name);
            Ok(())
        };
        for r in &self.rounds {
            put(format!("round_{}_m.csv", r.round), matrix_to_csv(&r.m, names))?;
            put(format!("round_{}_dsim.csv", r.round), matrix_to_csv(&r.d_sim, &obs.labels))?;
        }
        let f = self.rounds.len() + 1;
        put(format!("round_{f}_m.csv"), matrix_to_csv(&self.forecast_m, names))?;
        put(format!("round_{f}_dsim.csv"), matrix_to_csv(&self.forecast_d, &obs.labels))?;
        let manifest = EsmdaManifest {
            seed: config.seed,
            alphas: config.alphas.clone(),
            svd_tol: config.svd_tol,
            n_params: self.forecast_m.nrows(),
            n_data: self.forecast_d.nrows(),
            n_members: self.forecast_m.ncols(),
            parameter_names: names.to_vec(),
            observation_labels: obs.labels.clone(),
            files,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(dir.join("manifest.json"), text).map_err(io)?;
        Ok(manifest)
    }
}

/// Random stream used to perturb the observations in one round.
pub fn perturbation_rng(seed: u64, round: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(round as u64);
    rng
}

fn check_forward(d: &DMatrix<f64>, nd: usize, n_r: usize, round: usize) -> Result<(), EsmdaError> {
    if d.shape() != (nd, n_r) {
        return Err(EsmdaError::Shape(format!("forward output {:?}, expected ({nd}, {n_r})", d.shape())));
    }
    for j in 0..n_r {
        if d.column(j).iter().any(|v| !v.is_finite()) {
            return Err(EsmdaError::Forward { round, member: j, message: "non-finite simulated data".into() });
        }
    }
    Ok(())
}

/// Runs `N_a` assimilation rounds then the forecast. `forward` maps the
/// current parameter matrix to simulated data (one column per member) and is
/// called exactly `N_a + 1` times.
pub fn run_esmda<F>(
    initial: EnsembleState,
    obs: &ObservationSet,
    config: &AssimilationConfig,
    mut forward: F,
) -> Result<(EnsembleState, EsmdaLedger), EsmdaError>
where
    F: FnMut(&ForwardContext, &DMatrix<f64>) -> Result<DMatrix<f64>, MemberFailure>,
{
    validate_alphas(&config.alphas)?;
    obs.validate()?;
    let n_r = initial.members();
    if n_r < 2 {
        return Err(EsmdaError::TooFewMembers(n_r));
    }
    let nd = obs.len();
    let mut state = initial;
    let mut rounds = Vec::with_capacity(config.rounds());
    let mut calls = 0;
    let fail = |round: usize, f: MemberFailure| EsmdaError::Forward { round, member: f.member, message: f.message };
    for (i, &alpha) in config.alphas.iter().enumerate() {
        let round = i + 1;
        let ctx = ForwardContext { round, forecast: false };
        calls += 1;
        let d_sim = forward(&ctx, &state.m).map_err(|f| fail(round, f))?;
        check_forward(&d_sim, nd, n_r, round)?;
        let mut rng = perturbation_rng(config.seed, round);
        let d_uc = perturb_observations(obs, alpha, n_r, &mut rng);
        let (c_md, c_dd) = cross_covariance(&state.m, &d_sim)?;
        let k = kalman_gain(&c_md, &c_dd, &obs.variances, alpha, config.svd_tol)?;
        let next = update_ensemble(&state.m, &d_sim, &d_uc, &k)?;
        rounds.push(LedgerRound { round, alpha, m: state.m.clone(), d_sim });
        state.m = next;
        state.iteration = round;
    }
    let round = config.rounds() + 1;
    calls += 1;
    let d_final = forward(&ForwardContext { round, forecast: true }, &state.m).map_err(|f| fail(round, f))?;
    check_forward(&d_final, nd, n_r, round)?;
    let ledger = EsmdaLedger { rounds, forecast_m: state.m.clone(), forecast_d: d_final, forward_calls: calls };
    Ok((state, ledger))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_schedules() {
        assert!(validate_alphas(&[4.0; 4]).is_ok());
        assert!(validate_alphas(&[2.0, 2.0]).is_ok());
        assert!(validate_alphas(&[3.0, 3.0]).is_err());
        assert!(validate_alphas(&[]).is_err());
        assert!(validate_alphas(&[-2.0, 2.0 / 3.0]).is_err());
    }

    #[test]
    fn pinv_drops_small_singular_values() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-12]);
        let p = pinv(&a, 1e-8);
        assert_eq!(p[(0, 0)], 1.0);
        assert_eq!(p[(1, 1)], 0.0);
    }
}
