//! Grid search with leave-one-group-out cross-validation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{metrics, train, train_oracle, Dataset, Metrics, OracleError, PipelineSpec, RegressorSpec, TrainedOracle};
use crate::searchspace::SearchSpace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefitMetric {
    Mape,
    Mse,
    Mae,
}

impl RefitMetric {
    fn of(&self, m: &Metrics) -> f64 {
        match self {
            RefitMetric::Mape => m.mape,
            RefitMetric::Mse => m.mse,
            RefitMetric::Mae => m.mae,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvCandidate {
    pub regressor: RegressorSpec,
    pub pipeline: PipelineSpec,
}

impl CvCandidate {
    /// Cartesian product of regressors and pipeline specs.
    pub fn grid(regressors: &[RegressorSpec], pipelines: &[PipelineSpec]) -> Vec<CvCandidate> {
        let mut out = Vec::new();
        for r in regressors {
            for p in pipelines {
                out.push(CvCandidate { regressor: *r, pipeline: *p });
            }
        }
        out
    }
}

/// Scores of one split; metrics refer to the elapsed-time target unless
/// named otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitScores {
    pub held_out: String,
    pub train_groups: Vec<String>,
    pub train_rows: Vec<usize>,
    pub validation_rows: Vec<usize>,
    pub train: Metrics,
    pub validation: Metrics,
    pub validation_quality_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateResult {
    pub candidate: CvCandidate,
    pub splits: Vec<SplitScores>,
    pub mean_train: Metrics,
    pub mean_validation: Metrics,
    pub mean_validation_quality_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub refit_metric: RefitMetric,
    pub results: Vec<CandidateResult>,
    pub best: usize,
    pub refit: bool,
}

impl CvReport {
    pub fn best_candidate(&self) -> &CandidateResult {
        &self.results[self.best]
    }

    /// One row per (candidate, split) and one `mean` row per candidate.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "candidate",
            "regressor",
            "scaler",
            "top_k",
            "split",
            "train_mape",
            "train_mse",
            "train_mae",
            "val_mape",
            "val_mse",
            "val_mae",
            "val_quality_mae",
            "best",
        ])
        .expect("in-memory write");
        for (i, r) in self.results.iter().enumerate() {
            let c = &r.candidate;
            let base = [
                i.to_string(),
                c.regressor.label(),
                format!("{:?}", c.pipeline.scaler).to_lowercase(),
                c.pipeline.top_k.to_string(),
            ];
            let rows = r
                .splits
                .iter()
                .map(|s| (s.held_out.clone(), s.train, s.validation, s.validation_quality_mae))
                .chain(std::iter::once((
                    "mean".to_string(),
                    r.mean_train,
                    r.mean_validation,
                    r.mean_validation_quality_mae,
                )));
            for (split, t, v, q) in rows {
                let mut rec = base.to_vec();
                rec.push(split);
                for x in [t.mape, t.mse, t.mae, v.mape, v.mse, v.mae, q] {
                    rec.push(x.to_string());
                }
                rec.push((i == self.best).to_string());
                w.write_record(&rec).expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }
}

fn mean_metrics(ms: impl Iterator<Item = Metrics>) -> Metrics {
    let mut n = 0.0;
    let mut acc = Metrics { mape: 0.0, mse: 0.0, mae: 0.0 };
    for m in ms {
        acc.mape += m.mape;
        acc.mse += m.mse;
        acc.mae += m.mae;
        n += 1.0;
    }
    Metrics { mape: acc.mape / n, mse: acc.mse / n, mae: acc.mae / n }
}

fn run_split(
    ds: &Dataset,
    cand: &CvCandidate,
    held_out: &str,
    groups: &[String],
    seed: u64,
) -> Result<SplitScores, OracleError> {
    let (train_rows, validation_rows): (Vec<usize>, Vec<usize>) =
        (0..ds.rows.len()).partition(|&i| ds.rows[i].group_id != held_out);
    let train_set: Vec<_> = train_rows.iter().map(|&i| ds.rows[i].clone()).collect();
    let (pipe, et_model, q_model) = train(cand.regressor, cand.pipeline, &train_set, seed)?;
    let eval = |idx: &[usize]| -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>), OracleError> {
        let (mut yt, mut yp, mut qt, mut qp) = (vec![], vec![], vec![], vec![]);
        for &i in idx {
            let r = &ds.rows[i];
            let t = pipe.transform(&r.input())?;
            yt.push(r.elapsed_s);
            yp.push(et_model.predict(&t));
            qt.push(r.quality());
            qp.push(q_model.predict(&t));
        }
        Ok((yt, yp, qt, qp))
    };
    let (yt, yp, _, _) = eval(&train_rows)?;
    let train_m = metrics(&yt, &yp)?;
    let (yt, yp, qt, qp) = eval(&validation_rows)?;
    let val_m = metrics(&yt, &yp)?;
    let q_mae = qt.iter().zip(&qp).map(|(a, b)| (a - b).abs()).sum::<f64>() / qt.len() as f64;
    Ok(SplitScores {
        held_out: held_out.to_string(),
        train_groups: groups.iter().filter(|g| *g != held_out).cloned().collect(),
        train_rows,
        validation_rows,
        train: train_m,
        validation: val_m,
        validation_quality_mae: q_mae,
    })
}

/// Evaluates every candidate with one split per group (that group held out),
/// picks the lowest mean validation `refit_metric` on the elapsed target and
/// refits it on the whole dataset.
pub fn logo_cv(
    dataset: &Dataset,
    space: &SearchSpace,
    grid: &[CvCandidate],
    refit_metric: RefitMetric,
    seed: u64,
) -> Result<(CvReport, TrainedOracle), OracleError> {
    if grid.is_empty() {
        return Err(OracleError::EmptyGrid);
    }
    for c in grid {
        c.regressor.validate()?;
    }
    let groups = dataset.groups();
    if groups.len() < 2 {
        return Err(OracleError::TooFewGroups(groups.len()));
    }
    let jobs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|c| (0..groups.len()).map(move |g| (c, g))).collect();
    let scores: Vec<SplitScores> = jobs
        .par_iter()
        .map(|&(c, g)| run_split(dataset, &grid[c], &groups[g], &groups, seed))
        .collect::<Result<_, _>>()?;
    let mut results = Vec::with_capacity(grid.len());
    for (c, chunk) in scores.chunks(groups.len()).enumerate() {
        results.push(CandidateResult {
            candidate: grid[c],
            splits: chunk.to_vec(),
            mean_train: mean_metrics(chunk.iter().map(|s| s.train)),
            mean_validation: mean_metrics(chunk.iter().map(|s| s.validation)),
            mean_validation_quality_mae: chunk.iter().map(|s| s.validation_quality_mae).sum::<f64>()
                / chunk.len() as f64,
        });
    }
    let mut best = 0;
    for (i, r) in results.iter().enumerate() {
        if refit_metric.of(&r.mean_validation) < refit_metric.of(&results[best].mean_validation) {
            best = i;
        }
    }
    let chosen = grid[best];
    let oracle = train_oracle(chosen.regressor, chosen.pipeline, dataset, space, seed)?;
    Ok((CvReport { refit_metric, results, best, refit: true }, oracle))
}
