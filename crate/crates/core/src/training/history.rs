use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row label of the weighted total in a loss history.
pub const TOTAL_ROW: &str = "total";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub task_id: String,
    /// Mean training loss over the epoch's rounds.
    pub loss: f64,
    /// Mean training sum rate, when the loss is rate-based.
    pub sum_rate: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossHistory {
    pub records: Vec<EpochRecord>,
}

impl LossHistory {
    pub fn totals(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.task_id == TOTAL_ROW)
            .map(|r| r.loss)
            .collect()
    }

    pub fn for_task(&self, task_id: &str) -> impl Iterator<Item = &EpochRecord> {
        let id = task_id.to_owned();
        self.records.iter().filter(move |r| r.task_id == id)
    }

    pub fn extend(&mut self, other: LossHistory) {
        self.records.extend(other.records);
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| Error::Header(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let records = r.deserialize().collect::<Result<Vec<EpochRecord>, _>>()?;
        Ok(Self { records })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }
}
