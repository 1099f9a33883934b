use serde::{Deserialize, Serialize};

use super::work::KernelTimings;
use super::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SimStatus {
    Normal,
    Abnormal,
    Timeout,
}

impl SimStatus {
    pub const ALL: [SimStatus; 3] = [SimStatus::Normal, SimStatus::Abnormal, SimStatus::Timeout];

    pub fn as_str(&self) -> &'static str {
        match self {
            SimStatus::Normal => "NORMAL",
            SimStatus::Abnormal => "ABNORMAL",
            SimStatus::Timeout => "TIMEOUT",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub timesteps: u64,
    pub newton_cycles: u64,
    pub linear_iterations: u64,
    pub solver_failures: u64,
    pub cuts: u64,
}

/// Material balance error in percent per phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Mbe {
    pub oil: f64,
    pub water: f64,
    pub gas: f64,
}

impl Mbe {
    pub fn mean_abs(&self) -> f64 {
        (self.oil.abs() + self.water.abs() + self.gas.abs()) / 3.0
    }
}

/// Time series sampled at report days.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub days: Vec<f64>,
    pub series: Vec<Series>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub values: Vec<f64>,
}

impl Curves {
    pub fn with_names<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Self {
        Self {
            days: Vec::new(),
            series: names.into_iter().map(|n| Series { name: n.into(), values: Vec::new() }).collect(),
        }
    }

    pub fn push_row(&mut self, day: f64, values: &[f64]) {
        debug_assert_eq!(values.len(), self.series.len());
        self.days.push(day);
        for (s, v) in self.series.iter_mut().zip(values) {
            s.values.push(*v);
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.series.iter().find(|s| s.name == name).map(|s| s.values.as_slice())
    }

    pub fn last(&self, name: &str) -> Option<f64> {
        self.get(name).and_then(|v| v.last().copied())
    }

    /// `day,<series>...` with one row per report.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("day");
        for s in &self.series {
            out.push(',');
            out.push_str(&s.name);
        }
        out.push('\n');
        for (k, d) in self.days.iter().enumerate() {
            out.push_str(&d.to_string());
            for s in &self.series {
                out.push(',');
                out.push_str(&s.values[k].to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, SimError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| SimError::Parse("empty curves table".into()))?;
        let mut cols = header.split(',');
        if cols.next().map(str::trim) != Some("day") {
            return Err(SimError::Parse("curves table must start with a `day` column".into()));
        }
        let mut curves = Curves::with_names(cols.map(|c| c.trim().to_string()));
        let width = curves.series.len();
        for (ln, line) in lines.enumerate() {
            let vals: Result<Vec<f64>, _> = line.split(',').map(|v| v.trim().parse::<f64>()).collect();
            let vals = vals.map_err(|e| SimError::Parse(format!("curves row {}: {e}", ln + 2)))?;
            if vals.len() != width + 1 {
                return Err(SimError::Parse(format!(
                    "curves row {}: expected {} columns, found {}",
                    ln + 2,
                    width + 1,
                    vals.len()
                )));
            }
            curves.push_row(vals[0], &vals[1..]);
        }
        Ok(curves)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub status: SimStatus,
    /// Modeled elapsed seconds (see [`super::work`]).
    pub elapsed_s: f64,
    pub cpu_s: f64,
    /// Real wall-clock seconds of this run; informational, not reproducible.
    pub wall_s: f64,
    pub memory_peak_mb: f64,
    pub counters: Counters,
    pub kernel_timings: KernelTimings,
    pub curves: Curves,
    pub fip_series: Curves,
    pub mbe: Mbe,
    pub average_implicitness: f64,
    pub days_simulated: f64,
    pub horizon_days: f64,
    pub final_pressure: Vec<f64>,
    pub final_sw: Vec<f64>,
    pub message: Option<String>,
}

impl SimulationResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curves_csv_round_trip() {
        let mut c = Curves::with_names(["FIELD_OPT", "P1_WPT"]);
        c.push_row(0.0, &[0.0, 0.0]);
        c.push_row(30.5, &[1234.5678901234, 0.1 + 0.2]);
        let text = c.to_csv();
        assert!(text.starts_with("day,FIELD_OPT,P1_WPT\n"));
        assert_eq!(Curves::from_csv(&text).unwrap(), c);
    }

    #[test]
    fn ragged_row_rejected() {
        assert!(Curves::from_csv("day,A\n0,1,2\n").is_err());
    }
}
