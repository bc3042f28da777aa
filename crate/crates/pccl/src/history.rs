//! Line-delimited JSON training history.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use pccl_core::LossBundle;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Loss values of one optimizer step. Components a run does not use are
/// left out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub sup1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sup2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semi1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semi2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub con: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mac: Option<f64>,
    pub total: f64,
    pub lr: f64,
}

impl StepRecord {
    /// The bundle back with absent components as zero.
    pub fn bundle(&self) -> LossBundle {
        LossBundle {
            sup1: self.sup1,
            sup2: self.sup2.unwrap_or(0.0),
            semi1: self.semi1.unwrap_or(0.0),
            semi2: self.semi2.unwrap_or(0.0),
            con: self.con.unwrap_or(0.0),
            mac: self.mac.unwrap_or(0.0),
            total: self.total,
        }
    }
}

/// Validation result at the end of an epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    /// Mean total loss over the epoch's steps.
    pub mean_total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_dsc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_hd95: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_asd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_val_dsc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Step(StepRecord),
    Epoch(EpochRecord),
}

/// Appends records to a file, flushing after each line.
pub struct HistoryWriter {
    out: std::io::BufWriter<std::fs::File>,
    path: std::path::PathBuf,
}

impl HistoryWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path).map_err(Error::io(path))?;
        Ok(Self { out: std::io::BufWriter::new(file), path: path.to_path_buf() })
    }

    pub fn write(&mut self, record: &Record) -> Result<()> {
        let line = serde_json::to_string(record).expect("records serialise");
        writeln!(self.out, "{line}").map_err(Error::io(&self.path))?;
        self.out.flush().map_err(Error::io(&self.path))
    }
}

/// Parses a history file. Blank lines are skipped; anything else that is
/// not a record is an error naming the line.
pub fn read(path: &Path) -> Result<Vec<Record>> {
    let file = std::fs::File::open(path).map_err(Error::io(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::History {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(record);
    }
    if out.is_empty() {
        return Err(Error::History { path: path.to_path_buf(), line: 0, reason: "no records".into() });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn absent_components_are_omitted() {
        let r = Record::Step(StepRecord {
            step: 3,
            epoch: 0,
            sup1: 0.5,
            sup2: None,
            semi1: None,
            semi2: None,
            con: Some(0.25),
            mac: None,
            total: 0.75,
            lr: 0.01,
        });
        let line = serde_json::to_string(&r).unwrap();
        assert!(!line.contains("semi") && !line.contains("mac") && line.contains("\"con\""));
        assert_eq!(serde_json::from_str::<Record>(&line).unwrap(), r);
    }
}
