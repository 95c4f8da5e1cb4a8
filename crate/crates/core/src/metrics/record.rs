use std::fs::OpenOptions;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One row of the metrics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub scheme: String,
    pub task_id: String,
    pub snr_db: f64,
    /// Mean sum rate, bits/s/Hz.
    pub spectral_efficiency: f64,
    pub params: u64,
    /// Forward FLOPs per sample, millions.
    pub flops_m: f64,
    pub seed: u64,
    pub wall_ms: f64,
}

pub const METRICS_COLUMNS: [&str; 8] = [
    "scheme",
    "task_id",
    "snr_db",
    "spectral_efficiency",
    "params",
    "flops_m",
    "seed",
    "wall_ms",
];

pub fn metrics_to_csv(records: &[MetricsRecord]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(METRICS_COLUMNS)?;
    for r in records {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Header(e.to_string()))
}

pub fn metrics_from_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != METRICS_COLUMNS {
        return Err(Error::Header(format!("unexpected metrics columns {header:?}")));
    }
    Ok(r.deserialize().collect::<Result<Vec<_>, _>>()?)
}

/// Appends rows, writing the header when the file is new or empty.
pub fn append_metrics_csv(path: impl AsRef<Path>, records: &[MetricsRecord]) -> Result<()> {
    let path = path.as_ref();
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if fresh {
        w.write_record(METRICS_COLUMNS)?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
