use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agents::ResetReason;
use crate::Result;

/// One line of the newline-delimited training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        step: u64,
        nll: f64,
        episodes: usize,
        skipped: bool,
    },
    Eval {
        step: u64,
        auc: Option<f64>,
        nll: f64,
    },
    Reset {
        step: u64,
        slot: usize,
        reason: ResetReason,
    },
    NonFinite {
        step: u64,
        slot: usize,
        detail: String,
    },
    Checkpoint {
        step: u64,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    /// Per-step mean NLL in step order.
    pub fn nll_stream(&self) -> Vec<(u64, f64)> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Step { step, nll, .. } => Some((*step, *nll)),
                _ => None,
            })
            .collect()
    }

    pub fn evals(&self) -> Vec<(u64, Option<f64>, f64)> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Eval { step, auc, nll } => Some((*step, *auc, *nll)),
                _ => None,
            })
            .collect()
    }

    pub fn resets(&self) -> Vec<(u64, usize, ResetReason)> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Reset { step, slot, reason } => Some((*step, *slot, *reason)),
                _ => None,
            })
            .collect()
    }

    pub fn read_ndjson(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { records })
    }
}

/// Appends records to an NDJSON file, flushing after every write so a crash
/// leaves a complete prefix.
pub struct LogWriter {
    out: BufWriter<File>,
}

impl LogWriter {
    pub fn create(path: &Path, append: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)?;
        Ok(Self {
            out: BufWriter::new(file),
        })
    }

    pub fn write(&mut self, record: &LogRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}
