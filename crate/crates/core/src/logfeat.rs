//! Run logs and the feature vector the oracle trains on.
//!
//! A finished run is written as a line-oriented `KEY=VALUE` log. Features are
//! extracted from that log plus the case maps and the production curves, so
//! anything the oracle sees can be recovered from saved artifacts alone.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simkernel::{Curves, SimStatus, SimulationCase, SimulationResult, SIMULATOR_ID};

pub const MANDATORY_KEYS: [&str; 19] = [
    "SIMULATOR_ID",
    "END_STATUS",
    "ELAPSED_S",
    "CPU_S",
    "MEMORY_PEAK_MB",
    "TIMESTEPS",
    "NEWTON_CYCLES",
    "LINEAR_ITERS",
    "SOLVER_FAILURES",
    "CUTS",
    "DAYS_SIMULATED",
    "AVG_IMPLICITNESS",
    "MBE_OIL",
    "MBE_WATER",
    "MBE_GAS",
    "KERNEL_ASSEMBLY_S",
    "KERNEL_LINSOLVE_S",
    "KERNEL_WELLS_S",
    "KERNEL_IO_S",
];

/// Simulator identities with a one-hot slot in the flattened features.
pub const KNOWN_SIMULATORS: [&str; 1] = [SIMULATOR_ID];

pub const HISTOGRAM_BINS: usize = 10;

/// Domain decomposition count of the built-in simulator (single domain).
pub const DOMS: u64 = 1;

const DAYS_PER_YEAR: f64 = 365.25;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LogError {
    #[error("line {line}: expected KEY=VALUE, found {content:?}")]
    Malformed { line: usize, content: String },
    #[error("missing mandatory log key {0}")]
    MissingKey(String),
    #[error("duplicate log key {0}")]
    DuplicateKey(String),
    #[error("log key {key}: cannot parse value {value:?}")]
    BadValue { key: String, value: String },
    #[error("log reports zero timesteps")]
    ZeroTimesteps,
    #[error("curve statistics of an empty series")]
    EmptySeries,
    #[error("curves table lacks series {0}")]
    MissingCurve(String),
    #[error("{0} is zero")]
    ZeroDenominator(&'static str),
}

/// Ordered `KEY=VALUE` records.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LogDocument {
    pub records: Vec<(String, String)>,
}

impl LogDocument {
    pub fn push(&mut self, key: &str, value: impl fmt::Display) {
        self.records.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.records.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str, LogError> {
        self.get(key).ok_or_else(|| LogError::MissingKey(key.to_string()))
    }

    pub fn value<T: FromStr>(&self, key: &str) -> Result<T, LogError> {
        let raw = self.require(key)?;
        raw.parse().map_err(|_| LogError::BadValue { key: key.to_string(), value: raw.to_string() })
    }

    pub fn status(&self) -> Result<SimStatus, LogError> {
        let raw = self.require("END_STATUS")?;
        SimStatus::parse(raw).ok_or_else(|| LogError::BadValue { key: "END_STATUS".into(), value: raw.into() })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.records {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for LogDocument {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

pub fn emit_log(result: &SimulationResult, case: &SimulationCase) -> LogDocument {
    let mut log = LogDocument::default();
    let c = &result.counters;
    let k = &result.kernel_timings;
    log.push("SIMULATOR_ID", SIMULATOR_ID);
    log.push("END_STATUS", result.status.as_str());
    log.push("ELAPSED_S", result.elapsed_s);
    log.push("CPU_S", result.cpu_s);
    log.push("MEMORY_PEAK_MB", result.memory_peak_mb);
    log.push("TIMESTEPS", c.timesteps);
    log.push("NEWTON_CYCLES", c.newton_cycles);
    log.push("LINEAR_ITERS", c.linear_iterations);
    log.push("SOLVER_FAILURES", c.solver_failures);
    log.push("CUTS", c.cuts);
    log.push("DAYS_SIMULATED", result.days_simulated);
    log.push("AVG_IMPLICITNESS", result.average_implicitness);
    log.push("MBE_OIL", result.mbe.oil);
    log.push("MBE_WATER", result.mbe.water);
    log.push("MBE_GAS", result.mbe.gas);
    log.push("KERNEL_ASSEMBLY_S", k.assembly);
    log.push("KERNEL_LINSOLVE_S", k.linear_solve);
    log.push("KERNEL_WELLS_S", k.well_management);
    log.push("KERNEL_IO_S", k.io);
    log.push("HORIZON_DAYS", case.horizon_days);
    log.push("WALL_S", result.wall_s);
    if let Some(msg) = &result.message {
        // keep the record on one line
        log.push("MESSAGE", msg.replace(['\n', '\r'], " "));
    }
    log
}

pub fn parse_log(text: &str) -> Result<LogDocument, LogError> {
    let mut log = LogDocument::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = || LogError::Malformed { line: i + 1, content: line.to_string() };
        let (key, value) = line.split_once('=').ok_or_else(malformed)?;
        let valid_key = !key.is_empty()
            && key.chars().all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == '_');
        if !valid_key {
            return Err(malformed());
        }
        if log.get(key).is_some() {
            return Err(LogError::DuplicateKey(key.to_string()));
        }
        log.records.push((key.to_string(), value.to_string()));
    }
    let status = log.status()?;
    if status == SimStatus::Normal {
        for key in MANDATORY_KEYS {
            log.require(key)?;
        }
    }
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
    pub histogram: [u64; HISTOGRAM_BINS],
}

impl CurveStats {
    pub const LEN: usize = 4 + HISTOGRAM_BINS;

    fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&[self.min, self.max, self.mean, self.std]);
        out.extend(self.histogram.iter().map(|&c| c as f64));
    }

    fn names_into(prefix: &str, out: &mut Vec<String>) {
        for s in ["min", "max", "mean", "std"] {
            out.push(format!("{prefix}_{s}"));
        }
        for b in 0..HISTOGRAM_BINS {
            out.push(format!("{prefix}_hist{b}"));
        }
    }
}

/// Min, max, mean, population std and a 10-bin equal-width histogram over
/// `[min, max]`. A constant series puts every count in bin 0.
pub fn curve_statistics(series: &[f64]) -> Result<CurveStats, LogError> {
    if series.is_empty() {
        return Err(LogError::EmptySeries);
    }
    let n = series.len() as f64;
    let min = series.iter().copied().fold(f64::INFINITY, f64::min);
    let max = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = (series.iter().sum::<f64>() / n).clamp(min, max);
    let std = (series.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    let mut histogram = [0u64; HISTOGRAM_BINS];
    let width = max - min;
    for &x in series {
        let bin = if width > 0.0 {
            (((x - min) * HISTOGRAM_BINS as f64 / width) as usize).min(HISTOGRAM_BINS - 1)
        } else {
            0
        };
        histogram[bin] += 1;
    }
    Ok(CurveStats { min, max, mean, std, histogram })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub active_blocks: u64,
    pub cuts: u64,
    pub days_simulated: f64,
    pub doms: u64,
    pub newton_cycles: u64,
    pub solver_failures: u64,
    pub timesteps: u64,
    pub solver_iterations: u64,
    pub total_blocks: u64,
    pub wells: u64,
    pub et_per_timestep: f64,
    pub perm_x_stats: CurveStats,
    pub perm_y_stats: CurveStats,
    pub poro_stats: CurveStats,
    pub gp_stats: CurveStats,
    pub np_stats: CurveStats,
    pub wp_stats: CurveStats,
    pub avg_implicitness: f64,
    /// Assembly, linear solve, well management, I/O (seconds).
    pub kernel_timings: [f64; 4],
    pub cpu_time: f64,
    pub elapsed_time: f64,
    pub end_status: SimStatus,
    pub mbe_o: f64,
    pub mbe_w: f64,
    pub mbe_g: f64,
    pub memory_peak_mb: f64,
    pub sim_horizon_years: f64,
    pub simulator_id: String,
}

impl FeatureVector {
    /// Length of [`Self::flatten`]; the same for every run.
    pub const LEN: usize = 11 + 6 * CurveStats::LEN + 1 + 4 + 2 + SimStatus::ALL.len() + 3 + 2 + KNOWN_SIMULATORS.len();

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(Self::LEN);
        out.extend_from_slice(&[
            self.active_blocks as f64,
            self.cuts as f64,
            self.days_simulated,
            self.doms as f64,
            self.newton_cycles as f64,
            self.solver_failures as f64,
            self.timesteps as f64,
            self.solver_iterations as f64,
            self.total_blocks as f64,
            self.wells as f64,
            self.et_per_timestep,
        ]);
        for s in [&self.perm_x_stats, &self.perm_y_stats, &self.poro_stats, &self.gp_stats, &self.np_stats, &self.wp_stats] {
            s.flatten_into(&mut out);
        }
        out.push(self.avg_implicitness);
        out.extend_from_slice(&self.kernel_timings);
        out.push(self.cpu_time);
        out.push(self.elapsed_time);
        out.extend(SimStatus::ALL.iter().map(|s| if *s == self.end_status { 1.0 } else { 0.0 }));
        out.extend_from_slice(&[self.mbe_o, self.mbe_w, self.mbe_g]);
        out.push(self.memory_peak_mb);
        out.push(self.sim_horizon_years);
        out.extend(KNOWN_SIMULATORS.iter().map(|s| if *s == self.simulator_id { 1.0 } else { 0.0 }));
        debug_assert_eq!(out.len(), Self::LEN);
        out
    }

    /// Column names matching [`Self::flatten`].
    pub fn names() -> Vec<String> {
        let mut out: Vec<String> = [
            "active_blocks",
            "cuts",
            "days_simulated",
            "doms",
            "newton_cycles",
            "solver_failures",
            "timesteps",
            "solver_iterations",
            "total_blocks",
            "wells",
            "et_per_timestep",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for p in ["perm_x", "perm_y", "poro", "gp", "np", "wp"] {
            CurveStats::names_into(p, &mut out);
        }
        out.push("avg_implicitness".into());
        for k in ["assembly", "linsolve", "wells", "io"] {
            out.push(format!("kernel_{k}_s"));
        }
        out.push("cpu_time".into());
        out.push("elapsed_time".into());
        for s in SimStatus::ALL {
            out.push(format!("end_status_{}", s.as_str().to_lowercase()));
        }
        out.extend(["mbe_o", "mbe_w", "mbe_g", "memory_peak_mb", "sim_horizon_years"].map(String::from));
        for s in KNOWN_SIMULATORS {
            out.push(format!("simulator_{s}"));
        }
        out
    }
}

struct CaseStats {
    active: u64,
    total: u64,
    wells: u64,
    perm_x: CurveStats,
    perm_y: CurveStats,
    poro: CurveStats,
}

fn case_stats(case: &SimulationCase) -> Result<CaseStats, LogError> {
    let g = &case.grid;
    let pick = |v: &[f64]| -> Vec<f64> { v.iter().zip(&g.active).filter(|(_, a)| **a).map(|(x, _)| *x).collect() };
    Ok(CaseStats {
        active: g.active_cells() as u64,
        total: g.total_cells() as u64,
        wells: case.wells.len() as u64,
        perm_x: curve_statistics(&pick(&g.perm_x))?,
        perm_y: curve_statistics(&pick(&g.perm_y))?,
        poro: curve_statistics(&pick(&g.porosity))?,
    })
}

fn production_stats(curves: &Curves) -> Result<[CurveStats; 3], LogError> {
    let series = |name: &str| -> Result<&[f64], LogError> {
        curves.get(name).ok_or_else(|| LogError::MissingCurve(name.to_string()))
    };
    let np = series("FIELD_OPT")?;
    let wp = series("FIELD_WPT")?;
    // two-phase model: gas production is identically zero unless a table provides it
    let zeros = vec![0.0; np.len()];
    let gp = curves.get("FIELD_GPT").unwrap_or(&zeros);
    Ok([curve_statistics(gp)?, curve_statistics(np)?, curve_statistics(wp)?])
}

/// Builds the feature vector from a parsed log, the case maps and the
/// production curves table.
pub fn extract_features(log: &LogDocument, case: &SimulationCase, curves: &Curves) -> Result<FeatureVector, LogError> {
    let end_status = log.status()?;
    let timesteps: u64 = log.value("TIMESTEPS")?;
    if timesteps == 0 {
        return Err(LogError::ZeroTimesteps);
    }
    let elapsed: f64 = log.value("ELAPSED_S")?;
    let cs = case_stats(case)?;
    let [gp, np, wp] = production_stats(curves)?;
    Ok(FeatureVector {
        active_blocks: cs.active,
        cuts: log.value("CUTS")?,
        days_simulated: log.value("DAYS_SIMULATED")?,
        doms: DOMS,
        newton_cycles: log.value("NEWTON_CYCLES")?,
        solver_failures: log.value("SOLVER_FAILURES")?,
        timesteps,
        solver_iterations: log.value("LINEAR_ITERS")?,
        total_blocks: cs.total,
        wells: cs.wells,
        et_per_timestep: elapsed / timesteps as f64,
        perm_x_stats: cs.perm_x,
        perm_y_stats: cs.perm_y,
        poro_stats: cs.poro,
        gp_stats: gp,
        np_stats: np,
        wp_stats: wp,
        avg_implicitness: log.value("AVG_IMPLICITNESS")?,
        kernel_timings: [
            log.value("KERNEL_ASSEMBLY_S")?,
            log.value("KERNEL_LINSOLVE_S")?,
            log.value("KERNEL_WELLS_S")?,
            log.value("KERNEL_IO_S")?,
        ],
        cpu_time: log.value("CPU_S")?,
        elapsed_time: elapsed,
        end_status,
        mbe_o: log.value("MBE_OIL")?,
        mbe_w: log.value("MBE_WATER")?,
        mbe_g: log.value("MBE_GAS")?,
        memory_peak_mb: log.value("MEMORY_PEAK_MB")?,
        sim_horizon_years: case.horizon_days / DAYS_PER_YEAR,
        simulator_id: log.require("SIMULATOR_ID")?.to_string(),
    })
}

/// Same features as [`extract_features`], read straight from the result.
pub fn features_from_result(result: &SimulationResult, case: &SimulationCase) -> Result<FeatureVector, LogError> {
    let c = &result.counters;
    if c.timesteps == 0 {
        return Err(LogError::ZeroTimesteps);
    }
    let cs = case_stats(case)?;
    let [gp, np, wp] = production_stats(&result.curves)?;
    let k = &result.kernel_timings;
    Ok(FeatureVector {
        active_blocks: cs.active,
        cuts: c.cuts,
        days_simulated: result.days_simulated,
        doms: DOMS,
        newton_cycles: c.newton_cycles,
        solver_failures: c.solver_failures,
        timesteps: c.timesteps,
        solver_iterations: c.linear_iterations,
        total_blocks: cs.total,
        wells: cs.wells,
        et_per_timestep: result.elapsed_s / c.timesteps as f64,
        perm_x_stats: cs.perm_x,
        perm_y_stats: cs.perm_y,
        poro_stats: cs.poro,
        gp_stats: gp,
        np_stats: np,
        wp_stats: wp,
        avg_implicitness: result.average_implicitness,
        kernel_timings: [k.assembly, k.linear_solve, k.well_management, k.io],
        cpu_time: result.cpu_s,
        elapsed_time: result.elapsed_s,
        end_status: result.status,
        mbe_o: result.mbe.oil,
        mbe_w: result.mbe.water,
        mbe_g: result.mbe.gas,
        memory_peak_mb: result.memory_peak_mb,
        sim_horizon_years: case.horizon_days / DAYS_PER_YEAR,
        simulator_id: SIMULATOR_ID.to_string(),
    })
}

/// Newton cycles per timestep and linear iterations per Newton cycle.
pub fn derived_metrics(fv: &FeatureVector) -> Result<(f64, f64), LogError> {
    if fv.timesteps == 0 {
        return Err(LogError::ZeroDenominator("timesteps"));
    }
    if fv.newton_cycles == 0 {
        return Err(LogError::ZeroDenominator("newton_cycles"));
    }
    Ok((
        fv.newton_cycles as f64 / fv.timesteps as f64,
        fv.solver_iterations as f64 / fv.newton_cycles as f64,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_of_small_series() {
        let s = curve_statistics(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.min, s.max, s.mean), (1.0, 3.0, 2.0));
        assert!((s.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(s.histogram.iter().sum::<u64>(), 3);
    }

    #[test]
    fn constant_series_fills_first_bin() {
        let s = curve_statistics(&[5.0, 5.0]).unwrap();
        assert_eq!(s.std, 0.0);
        assert_eq!(s.histogram, [2, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn uniform_series_spreads_evenly() {
        let v: Vec<f64> = (0..100).map(f64::from).collect();
        assert_eq!(curve_statistics(&v).unwrap().histogram, [10; 10]);
    }

    #[test]
    fn empty_series_rejected() {
        assert_eq!(curve_statistics(&[]), Err(LogError::EmptySeries));
    }

    #[test]
    fn names_match_flattened_length() {
        assert_eq!(FeatureVector::names().len(), FeatureVector::LEN);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_log("END_STATUS=NORMAL\nnot a record\n").unwrap_err();
        assert!(matches!(err, LogError::Malformed { line: 2, .. }));
    }

    #[test]
    fn missing_mandatory_key_named() {
        let err = parse_log("END_STATUS=NORMAL\nTIMESTEPS=3\n").unwrap_err();
        assert_eq!(err, LogError::MissingKey("SIMULATOR_ID".into()));
    }

    #[test]
    fn unknown_keys_preserved() {
        let log = parse_log("END_STATUS=TIMEOUT\nFOO_BAR=a=b\n").unwrap();
        assert_eq!(log.get("FOO_BAR"), Some("a=b"));
    }
}
