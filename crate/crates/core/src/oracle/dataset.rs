use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::OracleError;
use crate::simkernel::SimStatus;

const FIXED_COLUMNS: [&str; 7] = ["group_id", "status", "timesteps", "elapsed_s", "mbe_o", "mbe_w", "mbe_g"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    /// Identity of the reservoir model the run belongs to.
    pub group_id: String,
    pub status: SimStatus,
    pub timesteps: u64,
    /// Flattened feature vector of the reference run.
    pub features: Vec<f64>,
    /// Encoded configuration.
    pub config: Vec<f64>,
    pub elapsed_s: f64,
    pub mbe_o: f64,
    pub mbe_w: f64,
    pub mbe_g: f64,
}

impl DatasetRow {
    /// Quality target: mean absolute material balance error over the phases.
    pub fn quality(&self) -> f64 {
        (self.mbe_o.abs() + self.mbe_w.abs() + self.mbe_g.abs()) / 3.0
    }

    /// Model input: features followed by the encoded configuration.
    pub fn input(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.features.len() + self.config.len());
        x.extend_from_slice(&self.features);
        x.extend_from_slice(&self.config);
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Group,
    Status,
    Count,
    Target,
    Feature,
    Config,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnDef {
    pub name: String,
    pub kind: ColumnKind,
}

/// Sidecar schema describing the CSV layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub feature_names: Vec<String>,
    pub config_names: Vec<String>,
    pub group_column: String,
    pub target_columns: Vec<String>,
    pub columns: Vec<ColumnDef>,
}

impl DatasetSchema {
    pub fn new(feature_names: Vec<String>, config_names: Vec<String>) -> Self {
        let mut columns = vec![
            ColumnDef { name: "group_id".into(), kind: ColumnKind::Group },
            ColumnDef { name: "status".into(), kind: ColumnKind::Status },
            ColumnDef { name: "timesteps".into(), kind: ColumnKind::Count },
        ];
        for t in ["elapsed_s", "mbe_o", "mbe_w", "mbe_g"] {
            columns.push(ColumnDef { name: t.into(), kind: ColumnKind::Target });
        }
        columns.extend(feature_names.iter().map(|n| ColumnDef { name: format!("f:{n}"), kind: ColumnKind::Feature }));
        columns.extend(config_names.iter().map(|n| ColumnDef { name: format!("c:{n}"), kind: ColumnKind::Config }));
        Self {
            feature_names,
            config_names,
            group_column: "group_id".into(),
            target_columns: ["elapsed_s", "mbe_o", "mbe_w", "mbe_g"].map(String::from).to_vec(),
            columns,
        }
    }

    pub fn input_len(&self) -> usize {
        self.feature_names.len() + self.config_names.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema: DatasetSchema,
    pub rows: Vec<DatasetRow>,
}

fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("schema.json")
}

impl Dataset {
    pub fn new(schema: DatasetSchema) -> Self {
        Self { schema, rows: Vec::new() }
    }

    pub fn push(&mut self, row: DatasetRow) -> Result<(), OracleError> {
        self.check_row(&row)?;
        self.rows.push(row);
        Ok(())
    }

    fn check_row(&self, row: &DatasetRow) -> Result<(), OracleError> {
        if row.features.len() != self.schema.feature_names.len() || row.config.len() != self.schema.config_names.len() {
            return Err(OracleError::Schema(format!(
                "row has {} features and {} config values, schema expects {} and {}",
                row.features.len(),
                row.config.len(),
                self.schema.feature_names.len(),
                self.schema.config_names.len()
            )));
        }
        Ok(())
    }

    pub fn groups(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.rows.iter().map(|r| r.group_id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.schema.columns.iter().map(|c| c.name.as_str())).expect("in-memory write");
        for r in &self.rows {
            let mut rec = vec![
                r.group_id.clone(),
                r.status.as_str().to_string(),
                r.timesteps.to_string(),
                r.elapsed_s.to_string(),
                r.mbe_o.to_string(),
                r.mbe_w.to_string(),
                r.mbe_g.to_string(),
            ];
            rec.extend(r.features.iter().map(f64::to_string));
            rec.extend(r.config.iter().map(f64::to_string));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }

    pub fn from_csv(text: &str, schema: DatasetSchema) -> Result<Self, OracleError> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = rd.headers()?.iter().map(String::from).collect();
        let expected: Vec<&str> = schema.columns.iter().map(|c| c.name.as_str()).collect();
        if header != expected {
            return Err(OracleError::Schema("CSV header does not match the schema".into()));
        }
        let nf = schema.feature_names.len();
        let mut ds = Dataset::new(schema);
        for (i, rec) in rd.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let num = |k: usize| -> Result<f64, OracleError> {
                rec[k].parse().map_err(|_| OracleError::Schema(format!("line {line}: bad number {:?}", &rec[k])))
            };
            let status = SimStatus::parse(&rec[1])
                .ok_or_else(|| OracleError::Schema(format!("line {line}: bad status {:?}", &rec[1])))?;
            let timesteps = rec[2]
                .parse()
                .map_err(|_| OracleError::Schema(format!("line {line}: bad timestep count {:?}", &rec[2])))?;
            let values = (FIXED_COLUMNS.len()..rec.len()).map(num).collect::<Result<Vec<f64>, _>>()?;
            let (features, config) = values.split_at(nf);
            ds.push(DatasetRow {
                group_id: rec[0].to_string(),
                status,
                timesteps,
                features: features.to_vec(),
                config: config.to_vec(),
                elapsed_s: num(3)?,
                mbe_o: num(4)?,
                mbe_w: num(5)?,
                mbe_g: num(6)?,
            })?;
        }
        Ok(ds)
    }

    /// Writes `path` (CSV) and the schema sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<(), OracleError> {
        fs::write(path, self.to_csv())?;
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&self.schema)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, OracleError> {
        let schema: DatasetSchema = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
        Self::from_csv(&fs::read_to_string(path)?, schema)
    }

    /// SHA-256 of the CSV form, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_csv().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Drops runs that did not end normally and runs of a single timestep.
pub fn clean_dataset(raw: &Dataset) -> Result<Dataset, OracleError> {
    let rows: Vec<DatasetRow> = raw
        .rows
        .iter()
        .filter(|r| r.status == SimStatus::Normal && r.timesteps > 1 && r.elapsed_s > 0.0)
        .cloned()
        .collect();
    if rows.is_empty() {
        return Err(OracleError::EmptyAfterCleaning);
    }
    Ok(Dataset { schema: raw.schema.clone(), rows })
}
