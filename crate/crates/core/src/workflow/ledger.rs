//! Per-run records of a workflow arm and the tuned-versus-baseline report.

use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use super::{CandidateScore, WetPolicy, WorkflowError};
use crate::logfeat::FeatureVector;
use crate::oracle::DatasetRow;
use crate::searchspace::{encode, ConfigSample, SearchSpace};
use crate::simkernel::{Counters, Mbe, SimStatus};

pub const HISTOGRAM_BINS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Tuned,
    Baseline,
}

impl Arm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Arm::Tuned => "tuned",
            Arm::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    /// 1-based; the last round is the forecast.
    pub round: usize,
    pub realization: usize,
    pub forecast: bool,
    pub sample: ConfigSample,
    pub status: SimStatus,
    pub elapsed_s: f64,
    pub wall_s: f64,
    pub timeout_s: Option<f64>,
    pub mbe: Mbe,
    pub mean_abs_mbe: f64,
    pub counters: Counters,
    pub features: FeatureVector,
    /// Features the run is described by as a training row: its own in
    /// round 1, the realization's previous run afterwards.
    pub reference_features: FeatureVector,
    pub chosen: Option<CandidateScore>,
}

impl RunEntry {
    /// Dataset group of the realization.
    pub fn group_id(&self) -> String {
        format!("realization_{}", self.realization)
    }

    pub fn dataset_row(&self, space: &SearchSpace) -> Result<DatasetRow, WorkflowError> {
        Ok(DatasetRow {
            group_id: self.group_id(),
            status: self.status,
            timesteps: self.counters.timesteps,
            features: self.reference_features.flatten(),
            config: encode(&self.sample, space)?,
            elapsed_s: self.elapsed_s,
            mbe_o: self.mbe.oil,
            mbe_w: self.mbe.water,
            mbe_g: self.mbe.gas,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefitRecord {
    /// Round whose configurations the refit oracle chose.
    pub round: usize,
    pub training_rows: usize,
    pub dataset_hash: String,
    pub candidate: String,
    pub cv_validation_mape: Option<f64>,
}

/// Append-only record of every simulation of one arm, round by round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub arm: Arm,
    pub n_r: usize,
    pub entries: Vec<RunEntry>,
    pub refits: Vec<RefitRecord>,
}

impl RunLedger {
    pub fn new(arm: Arm, n_r: usize) -> Self {
        Self { arm, n_r, entries: Vec::new(), refits: Vec::new() }
    }

    pub fn completed_rounds(&self) -> usize {
        self.entries.len() / self.n_r.max(1)
    }

    /// Appends a full round; it must be the next round and hold every
    /// realization in order.
    pub fn push_round(&mut self, entries: Vec<RunEntry>) -> Result<(), WorkflowError> {
        let round = self.completed_rounds() + 1;
        if entries.len() != self.n_r {
            return Err(WorkflowError::Shape(format!("round {round} has {} runs, expected {}", entries.len(), self.n_r)));
        }
        for (j, e) in entries.iter().enumerate() {
            if e.round != round || e.realization != j {
                return Err(WorkflowError::Shape(format!(
                    "entry (round {}, realization {}) out of place at ({round}, {j})",
                    e.round, e.realization
                )));
            }
        }
        self.entries.extend(entries);
        Ok(())
    }

    pub fn round(&self, round: usize) -> &[RunEntry] {
        let lo = (round - 1) * self.n_r;
        &self.entries[lo..lo + self.n_r]
    }

    pub fn simulations(&self) -> usize {
        self.entries.len()
    }

    /// Mean elapsed time of the runs in the given rounds.
    pub fn mean_elapsed(&self, rounds: RangeInclusive<usize>) -> f64 {
        let v: Vec<f64> = self.entries.iter().filter(|e| rounds.contains(&e.round)).map(|e| e.elapsed_s).collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn distinct_samples(&self) -> Vec<ConfigSample> {
        let mut out: Vec<ConfigSample> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.sample) {
                out.push(e.sample.clone());
            }
        }
        out
    }

    pub fn dataset_rows(&self, space: &SearchSpace) -> Result<Vec<DatasetRow>, WorkflowError> {
        self.entries.iter().map(|e| e.dataset_row(space)).collect()
    }

    /// One row per run. Wall-clock time is left to the JSON form so the
    /// table is reproducible.
    pub fn to_csv(&self, space: &SearchSpace) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = [
            "arm",
            "round",
            "realization",
            "forecast",
            "status",
            "elapsed_s",
            "timeout_s",
            "mean_abs_mbe",
            "mbe_o",
            "mbe_w",
            "mbe_g",
            "timesteps",
            "newton_cycles",
            "linear_iterations",
            "cuts",
            "pred_elapsed_s",
            "pred_mean_abs_mbe",
            "pred_wet",
        ]
        .map(String::from)
        .to_vec();
        header.extend(space.params().iter().map(|p| p.name.clone()));
        w.write_record(&header).expect("in-memory write");
        for e in &self.entries {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            let mut rec = vec![
                self.arm.as_str().to_string(),
                e.round.to_string(),
                e.realization.to_string(),
                e.forecast.to_string(),
                e.status.as_str().to_string(),
                e.elapsed_s.to_string(),
                opt(e.timeout_s),
                e.mean_abs_mbe.to_string(),
                e.mbe.oil.to_string(),
                e.mbe.water.to_string(),
                e.mbe.gas.to_string(),
                e.counters.timesteps.to_string(),
                e.counters.newton_cycles.to_string(),
                e.counters.linear_iterations.to_string(),
                e.counters.cuts.to_string(),
                opt(e.chosen.as_ref().map(|c| c.elapsed_s)),
                opt(e.chosen.as_ref().map(|c| c.mean_abs_mbe)),
                opt(e.chosen.as_ref().map(|c| c.wet)),
            ];
            for p in space.params() {
                rec.push(e.sample.get(&p.name).map(|v| v.to_string()).unwrap_or_default());
            }
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ledger serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, WorkflowError> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    /// `None` for the all-rounds row.
    pub round: Option<usize>,
    pub tuned_total_s: f64,
    pub baseline_total_s: f64,
    pub tuned_mean_s: f64,
    pub baseline_mean_s: f64,
    /// Baseline mean elapsed over tuned mean elapsed.
    pub speedup: f64,
    pub tuned_mean_mbe: f64,
    pub baseline_mean_mbe: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub tuned: Vec<u64>,
    pub baseline: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupReport {
    pub rounds: Vec<RoundSummary>,
    pub total: RoundSummary,
    pub elapsed_histogram: Histogram,
    pub mbe_histogram: Histogram,
    pub tuned_bands: [u64; 3],
    pub baseline_bands: [u64; 3],
    /// `(arm, round, realization, elapsed_s, mean_abs_mbe, band)`.
    pub runs: Vec<(Arm, usize, usize, f64, f64, usize)>,
}

fn summarize(round: Option<usize>, t: &[&RunEntry], b: &[&RunEntry]) -> RoundSummary {
    let sum = |v: &[&RunEntry], f: fn(&RunEntry) -> f64| v.iter().map(|e| f(e)).sum::<f64>();
    let (tt, bt) = (sum(t, |e| e.elapsed_s), sum(b, |e| e.elapsed_s));
    let (tm, bm) = (tt / t.len() as f64, bt / b.len() as f64);
    RoundSummary {
        round,
        tuned_total_s: tt,
        baseline_total_s: bt,
        tuned_mean_s: tm,
        baseline_mean_s: bm,
        speedup: bm / tm,
        tuned_mean_mbe: sum(t, |e| e.mean_abs_mbe) / t.len() as f64,
        baseline_mean_mbe: sum(b, |e| e.mean_abs_mbe) / b.len() as f64,
    }
}

fn histogram(t: &[f64], b: &[f64]) -> Histogram {
    let all = t.iter().chain(b);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    let edges = (0..=HISTOGRAM_BINS).map(|k| lo + width * k as f64).collect();
    let count = |v: &[f64]| {
        let mut h = vec![0u64; HISTOGRAM_BINS];
        for &x in v {
            let k = if width > 0.0 { ((x - lo) / width) as usize } else { 0 };
            h[k.min(HISTOGRAM_BINS - 1)] += 1;
        }
        h
    };
    Histogram { edges, tuned: count(t), baseline: count(b) }
}

/// Compares two complete ledgers of the same ensemble shape.
pub fn speedup_report(
    tuned: &RunLedger,
    baseline: &RunLedger,
    policy: &WetPolicy,
) -> Result<SpeedupReport, WorkflowError> {
    if tuned.n_r != baseline.n_r || tuned.entries.len() != baseline.entries.len() {
        return Err(WorkflowError::Shape(format!(
            "tuned {} runs of {} realizations, baseline {} runs of {}",
            tuned.entries.len(),
            tuned.n_r,
            baseline.entries.len(),
            baseline.n_r
        )));
    }
    if tuned.entries.is_empty() {
        return Err(WorkflowError::Shape("ledgers are empty".into()));
    }
    let n_rounds = tuned.completed_rounds();
    let rounds = (1..=n_rounds)
        .map(|r| {
            let t: Vec<&RunEntry> = tuned.round(r).iter().collect();
            let b: Vec<&RunEntry> = baseline.round(r).iter().collect();
            summarize(Some(r), &t, &b)
        })
        .collect();
    let t: Vec<&RunEntry> = tuned.entries.iter().collect();
    let b: Vec<&RunEntry> = baseline.entries.iter().collect();
    let total = summarize(None, &t, &b);
    let et = |l: &RunLedger| l.entries.iter().map(|e| e.elapsed_s).collect::<Vec<_>>();
    let q = |l: &RunLedger| l.entries.iter().map(|e| e.mean_abs_mbe).collect::<Vec<_>>();
    let bands = |l: &RunLedger| {
        let mut c = [0u64; 3];
        for e in &l.entries {
            c[policy.band(e.mean_abs_mbe)] += 1;
        }
        c
    };
    let mut runs = Vec::with_capacity(2 * t.len());
    for l in [tuned, baseline] {
        for e in &l.entries {
            runs.push((l.arm, e.round, e.realization, e.elapsed_s, e.mean_abs_mbe, policy.band(e.mean_abs_mbe)));
        }
    }
    Ok(SpeedupReport {
        rounds,
        total,
        elapsed_histogram: histogram(&et(tuned), &et(baseline)),
        mbe_histogram: histogram(&q(tuned), &q(baseline)),
        tuned_bands: bands(tuned),
        baseline_bands: bands(baseline),
        runs,
    })
}

fn to_string(w: csv::Writer<Vec<u8>>) -> String {
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

impl SpeedupReport {
    /// Per-round and total elapsed sums, means and speedups.
    pub fn summary_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "round",
            "tuned_total_s",
            "baseline_total_s",
            "tuned_mean_s",
            "baseline_mean_s",
            "speedup",
            "tuned_mean_mbe",
            "baseline_mean_mbe",
        ])
        .expect("in-memory write");
        for s in self.rounds.iter().chain(std::iter::once(&self.total)) {
            let round = s.round.map(|r| r.to_string()).unwrap_or_else(|| "total".into());
            let vals = [
                s.tuned_total_s,
                s.baseline_total_s,
                s.tuned_mean_s,
                s.baseline_mean_s,
                s.speedup,
                s.tuned_mean_mbe,
                s.baseline_mean_mbe,
            ];
            let mut rec = vec![round];
            rec.extend(vals.iter().map(f64::to_string));
            w.write_record(&rec).expect("in-memory write");
        }
        to_string(w)
    }

    /// Elapsed and quality histograms on shared bins.
    pub fn histogram_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["metric", "bin_lo", "bin_hi", "tuned", "baseline"]).expect("in-memory write");
        for (name, h) in [("elapsed_s", &self.elapsed_histogram), ("mean_abs_mbe", &self.mbe_histogram)] {
            for k in 0..HISTOGRAM_BINS {
                w.write_record([
                    name.to_string(),
                    h.edges[k].to_string(),
                    h.edges[k + 1].to_string(),
                    h.tuned[k].to_string(),
                    h.baseline[k].to_string(),
                ])
                .expect("in-memory write");
            }
        }
        to_string(w)
    }

    /// Run counts per WET band.
    pub fn bands_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["band", "tuned", "baseline"]).expect("in-memory write");
        for (k, name) in ["low", "mid", "high"].iter().enumerate() {
            w.write_record([name.to_string(), self.tuned_bands[k].to_string(), self.baseline_bands[k].to_string()])
                .expect("in-memory write");
        }
        to_string(w)
    }

    /// One row per run of either arm.
    pub fn runs_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["arm", "round", "realization", "elapsed_s", "mean_abs_mbe", "band"]).expect("in-memory write");
        for (arm, r, j, et, q, band) in &self.runs {
            w.write_record([
                arm.as_str().to_string(),
                r.to_string(),
                j.to_string(),
                et.to_string(),
                q.to_string(),
                band.to_string(),
            ])
            .expect("in-memory write");
        }
        to_string(w)
    }
}
