use serde::{Deserialize, Serialize};

use super::OracleError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaler {
    Rescale01,
    Standardize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub scaler: Scaler,
    /// Fraction of columns kept by the selection stage: 1.0, 0.9 or 0.8.
    pub top_k: f64,
}

pub const TOP_K_GRID: [f64; 3] = [1.0, 0.9, 0.8];

impl PipelineSpec {
    pub fn grid() -> Vec<PipelineSpec> {
        let mut out = Vec::new();
        for scaler in [Scaler::Rescale01, Scaler::Standardize] {
            for top_k in TOP_K_GRID {
                out.push(PipelineSpec { scaler, top_k });
            }
        }
        out
    }
}

/// Model input after scaling and column selection. Only [`FittedPipeline`]
/// produces these, so a vector cannot be transformed twice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Transformed(pub(crate) Vec<f64>);

impl Transformed {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedPipeline {
    pub spec: PipelineSpec,
    pub input_len: usize,
    /// Per column: (min, max) for rescaling, (mean, std) for standardizing.
    pub stats: Vec<(f64, f64)>,
    /// Kept column indices, ascending.
    pub selected: Vec<usize>,
}

fn pearson_abs(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).abs();
    if r.is_finite() {
        r
    } else {
        0.0
    }
}

/// Number of columns kept out of `m` for a top-k fraction.
pub fn selected_count(m: usize, top_k: f64) -> usize {
    ((m as f64 * top_k).round() as usize).clamp(1, m.max(1))
}

impl FittedPipeline {
    /// Fits scaler statistics and the top-k selection on training rows.
    /// Columns are scored by absolute Pearson correlation with `target`.
    pub fn fit(spec: PipelineSpec, rows: &[Vec<f64>], target: &[f64]) -> Result<Self, OracleError> {
        if rows.len() < 2 {
            return Err(OracleError::TooFewRows(rows.len()));
        }
        let m = rows[0].len();
        if rows.iter().any(|r| r.len() != m) || target.len() != rows.len() {
            return Err(OracleError::Schema("ragged training matrix".into()));
        }
        let n = rows.len() as f64;
        let mut stats = Vec::with_capacity(m);
        let mut scores = Vec::with_capacity(m);
        let mut col = vec![0.0; rows.len()];
        for j in 0..m {
            for (c, r) in col.iter_mut().zip(rows) {
                *c = r[j];
            }
            stats.push(match spec.scaler {
                Scaler::Rescale01 => (
                    col.iter().copied().fold(f64::INFINITY, f64::min),
                    col.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                ),
                Scaler::Standardize => {
                    let mean = col.iter().sum::<f64>() / n;
                    let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    (mean, var.sqrt())
                }
            });
            scores.push(pearson_abs(&col, target));
        }
        let k = selected_count(m, spec.top_k);
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let mut selected = order[..k].to_vec();
        selected.sort_unstable();
        Ok(Self { spec, input_len: m, stats, selected })
    }

    fn scale(&self, j: usize, v: f64) -> f64 {
        let (a, b) = self.stats[j];
        match self.spec.scaler {
            Scaler::Rescale01 => {
                if b > a {
                    (v - a) / (b - a)
                } else {
                    0.0
                }
            }
            Scaler::Standardize => {
                if b > 0.0 {
                    (v - a) / b
                } else {
                    0.0
                }
            }
        }
    }

    pub fn transform(&self, raw: &[f64]) -> Result<Transformed, OracleError> {
        if raw.len() != self.input_len {
            return Err(OracleError::Schema(format!(
                "input has {} columns, pipeline expects {}",
                raw.len(),
                self.input_len
            )));
        }
        Ok(Transformed(self.selected.iter().map(|&j| self.scale(j, raw[j])).collect()))
    }

    pub fn transform_all(&self, rows: &[Vec<f64>]) -> Result<Vec<Transformed>, OracleError> {
        rows.iter().map(|r| self.transform(r)).collect()
    }
}
