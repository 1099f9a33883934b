//! Performance oracle: predicts elapsed time and mean absolute material
//! balance error of a run from the features of a reference run of the same
//! model plus a candidate configuration.

mod cv;
mod dataset;
mod models;
mod pipeline;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cv::{logo_cv, CvCandidate, CvReport, CandidateResult, RefitMetric, SplitScores};
pub use dataset::{clean_dataset, ColumnDef, ColumnKind, Dataset, DatasetRow, DatasetSchema};
pub use models::{
    Criterion, MaxFeatures, Model, Node, RegressorSpec, Tree, DEPTH_GRID, MINKOWSKI_P_GRID, N_ESTIMATORS_GRID,
    N_NEIGHBORS_GRID,
};
pub use pipeline::{selected_count, FittedPipeline, PipelineSpec, Scaler, Transformed, TOP_K_GRID};

use crate::logfeat::FeatureVector;
use crate::searchspace::{encode, ConfigSample, SearchError, SearchSpace};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("dataset is empty after cleaning")]
    EmptyAfterCleaning,
    #[error("need at least 2 rows to fit, got {0}")]
    TooFewRows(usize),
    #[error("cross-validation needs at least 2 groups, got {0}")]
    TooFewGroups(usize),
    #[error("invalid hyperparameters: {0}")]
    Hyperparameters(String),
    #[error("empty model grid")]
    EmptyGrid,
    #[error("metric undefined: {0}")]
    Metric(String),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mape: f64,
    pub mse: f64,
    pub mae: f64,
}

/// MAPE (percent), MSE and MAE. Zero true values make MAPE undefined.
pub fn metrics(y_true: &[f64], y_pred: &[f64]) -> Result<Metrics, OracleError> {
    if y_true.is_empty() || y_true.len() != y_pred.len() {
        return Err(OracleError::Metric(format!("lengths {} and {}", y_true.len(), y_pred.len())));
    }
    if let Some(i) = y_true.iter().position(|&v| v == 0.0) {
        return Err(OracleError::Metric(format!("true value at row {i} is zero")));
    }
    let n = y_true.len() as f64;
    let (mut ape, mut se, mut ae) = (0.0, 0.0, 0.0);
    for (y, p) in y_true.iter().zip(y_pred) {
        let e = y - p;
        ape += (e / y).abs();
        se += e * e;
        ae += e.abs();
    }
    Ok(Metrics { mape: ape / n * 100.0, mse: se / n, mae: ae / n })
}

/// Two regressors (elapsed seconds, mean |MBE|) behind one fitted pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedOracle {
    pub pipeline: FittedPipeline,
    pub regressor: RegressorSpec,
    pub elapsed_model: Model,
    pub quality_model: Model,
    pub seed: u64,
    pub dataset_hash: String,
    pub training_rows: usize,
    pub feature_names: Vec<String>,
    pub space: SearchSpace,
}

/// Fits the pipeline on `rows` and both regressors on the transformed rows.
pub fn train(
    regressor: RegressorSpec,
    pipeline: PipelineSpec,
    rows: &[DatasetRow],
    seed: u64,
) -> Result<(FittedPipeline, Model, Model), OracleError> {
    regressor.validate()?;
    let x: Vec<Vec<f64>> = rows.iter().map(DatasetRow::input).collect();
    let y_et: Vec<f64> = rows.iter().map(|r| r.elapsed_s).collect();
    let y_q: Vec<f64> = rows.iter().map(DatasetRow::quality).collect();
    let fitted = FittedPipeline::fit(pipeline, &x, &y_et)?;
    let xt = fitted.transform_all(&x)?;
    let (et, q) = rayon::join(
        || Model::fit(&regressor, &xt, &y_et, seed),
        || Model::fit(&regressor, &xt, &y_q, seed.wrapping_add(1)),
    );
    Ok((fitted, et?, q?))
}

/// [`train`] on a whole dataset, packaged with its metadata.
pub fn train_oracle(
    regressor: RegressorSpec,
    pipeline: PipelineSpec,
    dataset: &Dataset,
    space: &SearchSpace,
    seed: u64,
) -> Result<TrainedOracle, OracleError> {
    if dataset.schema.config_names != space.encoded_names() {
        return Err(OracleError::Schema("dataset configuration columns do not match the search space".into()));
    }
    let (pipeline, elapsed_model, quality_model) = train(regressor, pipeline, &dataset.rows, seed)?;
    Ok(TrainedOracle {
        pipeline,
        regressor,
        elapsed_model,
        quality_model,
        seed,
        dataset_hash: dataset.hash(),
        training_rows: dataset.rows.len(),
        feature_names: dataset.schema.feature_names.clone(),
        space: space.clone(),
    })
}

impl TrainedOracle {
    /// Predicts `(elapsed_s, mean_abs_mbe)` from a raw input vector
    /// (features followed by the encoded configuration).
    pub fn predict_raw(&self, input: &[f64]) -> Result<(f64, f64), OracleError> {
        let t = self.pipeline.transform(input)?;
        Ok((self.elapsed_model.predict(&t), self.quality_model.predict(&t)))
    }

    pub fn predict(&self, features: &FeatureVector, sample: &ConfigSample) -> Result<(f64, f64), OracleError> {
        let mut input = features.flatten();
        if input.len() != self.feature_names.len() {
            return Err(OracleError::Schema(format!(
                "feature vector has {} slots, oracle expects {}",
                input.len(),
                self.feature_names.len()
            )));
        }
        input.extend(encode(sample, &self.space)?);
        self.predict_raw(&input)
    }

    /// Order-preserving batch prediction.
    pub fn predict_batch(
        &self,
        features: &FeatureVector,
        samples: &[ConfigSample],
    ) -> Result<Vec<(f64, f64)>, OracleError> {
        samples.par_iter().map(|s| self.predict(features, s)).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("oracle serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, OracleError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), OracleError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, OracleError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
