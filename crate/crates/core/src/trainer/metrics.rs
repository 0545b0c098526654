//! JSON-lines metrics log: one `step` record per optimizer step and one
//! `epoch` record per epoch. Records carry no wall-clock data, so identical
//! runs produce byte-identical logs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossFlag, LossReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub scenes: Vec<u64>,
    #[serde(flatten)]
    pub losses: LossReport,
    pub n_p: usize,
    pub n_o: usize,
    pub n: usize,
    pub masked_persons: usize,
    pub grad_norm: f64,
    pub flags: Vec<LossFlag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: u64,
    #[serde(flatten)]
    pub losses: LossReport,
    pub clusters: Option<usize>,
    pub outliers: Option<usize>,
    pub detached: Option<usize>,
    pub bank_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MetricRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
}

/// Keeps records in memory and optionally streams them to a file.
#[derive(Debug, Default)]
pub struct MetricsLog {
    writer: Option<BufWriter<File>>,
    pub records: Vec<MetricRecord>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        MetricsLog::default()
    }

    /// Appends to `path`, creating it if needed.
    pub fn to_file(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let f = fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(MetricsLog {
            writer: Some(BufWriter::new(f)),
            records: Vec::new(),
        })
    }

    pub fn push(&mut self, record: MetricRecord) -> Result<()> {
        if let Some(w) = &mut self.writer {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.writer {
            w.flush()?;
        }
        Ok(())
    }

    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(|r| match r {
            MetricRecord::Step(s) => Some(s),
            _ => None,
        })
    }

    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter_map(|r| match r {
            MetricRecord::Epoch(e) => Some(e),
            _ => None,
        })
    }

    /// Serializes the in-memory records exactly as the file sink writes them.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        s
    }
}

impl Drop for MetricsLog {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Load {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}
