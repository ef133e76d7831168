//! Clustered dose-response observations and their CSV representation.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Curve label used when the input has no `curve` column.
pub const DEFAULT_CURVE: &str = "1";

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub dose: f64,
    pub response: f64,
    pub cluster_id: String,
    pub curve_id: String,
}

/// Immutable, validated set of observations indexed by cluster and curve.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    observations: Vec<Observation>,
    cluster_index: BTreeMap<String, Vec<usize>>,
    curve_index: BTreeMap<String, Vec<usize>>,
}

impl Dataset {
    pub fn new(observations: Vec<Observation>) -> Result<Self> {
        if observations.is_empty() {
            return Err(Error::DegenerateData("dataset has no observations".into()));
        }
        let mut cluster_index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut curve_index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, obs) in observations.iter().enumerate() {
            if !obs.dose.is_finite() || obs.dose < 0.0 {
                return Err(Error::Validation {
                    row: i + 1,
                    msg: format!("dose must be finite and nonnegative, got {}", obs.dose),
                });
            }
            if !obs.response.is_finite() {
                return Err(Error::Validation {
                    row: i + 1,
                    msg: format!("response must be finite, got {}", obs.response),
                });
            }
            cluster_index.entry(obs.cluster_id.clone()).or_default().push(i);
            curve_index.entry(obs.curve_id.clone()).or_default().push(i);
        }
        Ok(Dataset { observations, cluster_index, curve_index })
    }

    pub fn load_csv<P: AsRef<Path>>(path: P) -> Result<Self> {
        let file = File::open(path.as_ref()).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.as_ref().display())))
        })?;
        Self::from_reader(file)
    }

    /// Parse CSV with a header row containing `dose`, `response`, `cluster`
    /// and optionally `curve`. Row numbers in errors count data rows from 1.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(|e| Error::Parse { row: 0, msg: e.to_string() })?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let dose_col = col("dose").ok_or_else(|| Error::Schema("dose".into()))?;
        let resp_col = col("response").ok_or_else(|| Error::Schema("response".into()))?;
        let cluster_col = col("cluster").ok_or_else(|| Error::Schema("cluster".into()))?;
        let curve_col = col("curve");

        let mut observations = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 1;
            let rec = rec.map_err(|e| Error::Parse { row, msg: e.to_string() })?;
            let field = |c: usize, name: &str| {
                rec.get(c).ok_or_else(|| Error::Parse { row, msg: format!("missing `{name}` field") })
            };
            let number = |c: usize, name: &str| -> Result<f64> {
                let s = field(c, name)?;
                s.parse::<f64>()
                    .map_err(|_| Error::Parse { row, msg: format!("cannot parse `{name}` value `{s}`") })
            };
            let dose = number(dose_col, "dose")?;
            let response = number(resp_col, "response")?;
            let cluster_id = field(cluster_col, "cluster")?.to_string();
            if cluster_id.is_empty() {
                return Err(Error::Validation { row, msg: "empty cluster label".into() });
            }
            let curve_id = match curve_col {
                Some(c) => field(c, "curve")?.to_string(),
                None => DEFAULT_CURVE.to_string(),
            };
            if curve_id.is_empty() {
                return Err(Error::Validation { row, msg: "empty curve label".into() });
            }
            if !dose.is_finite() || dose < 0.0 {
                return Err(Error::Validation {
                    row,
                    msg: format!("dose must be finite and nonnegative, got {dose}"),
                });
            }
            if !response.is_finite() {
                return Err(Error::Validation { row, msg: format!("response must be finite, got {response}") });
            }
            observations.push(Observation { dose, response, cluster_id, curve_id });
        }
        Self::new(observations)
    }

    /// Emit the dataset as CSV with 17 significant digits per value.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["dose", "response", "cluster", "curve"])?;
        for o in &self.observations {
            w.write_record([
                format!("{:.16e}", o.dose),
                format!("{:.16e}", o.response),
                o.cluster_id.clone(),
                o.curve_id.clone(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Number of clusters.
    pub fn n_clusters(&self) -> usize {
        self.cluster_index.len()
    }

    pub fn cluster_index(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.cluster_index
    }

    pub fn curve_index(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.curve_index
    }

    /// Curve labels in sorted order.
    pub fn curves(&self) -> Vec<String> {
        self.curve_index.keys().cloned().collect()
    }

    pub fn clusters(&self) -> Vec<String> {
        self.cluster_index.keys().cloned().collect()
    }

    /// `(doses, responses)` of the observations at `indices`.
    pub fn columns(&self, indices: &[usize]) -> (Vec<f64>, Vec<f64>) {
        indices.iter().map(|&i| (self.observations[i].dose, self.observations[i].response)).unzip()
    }

    pub fn summarize(&self) -> DataSummary {
        let doses_per_cluster = self
            .cluster_index
            .iter()
            .map(|(k, idx)| {
                let mut d: Vec<f64> = idx.iter().map(|&i| self.observations[i].dose).collect();
                d.sort_by(f64::total_cmp);
                d.dedup();
                (k.clone(), d.len())
            })
            .collect();
        let (lo, hi) = self
            .observations
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), o| (lo.min(o.response), hi.max(o.response)));
        DataSummary {
            m: self.n_clusters(),
            n: self.len(),
            doses_per_cluster,
            curves: self.curves(),
            response_range: (lo, hi),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataSummary {
    pub m: usize,
    pub n: usize,
    /// Distinct dose levels per cluster.
    pub doses_per_cluster: BTreeMap<String, usize>,
    pub curves: Vec<String>,
    pub response_range: (f64, f64),
}
