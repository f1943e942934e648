//! Per-epoch metrics log.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use spiketrain_core::optimize::EpochMetrics;

use crate::error::CliError;

pub const HEADER: &str = "epoch,train_loss,train_acc,test_acc,wall_seconds";

/// One CSV row; `test_acc` is empty for epochs without a test evaluation.
pub fn format_row(m: &EpochMetrics, wall_seconds: f64) -> String {
    let test = m.test_acc.map(|a| a.to_string()).unwrap_or_default();
    format!("{},{},{},{},{}", m.epoch, m.train_loss, m.train_acc, test, wall_seconds)
}

/// Creates the log with its header and flushes after every row.
pub struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self, CliError> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|e| CliError::io(path, e))?;
        let mut log = Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        log.line(HEADER)?;
        Ok(log)
    }

    pub fn append(&mut self, m: &EpochMetrics, wall_seconds: f64) -> Result<(), CliError> {
        self.line(&format_row(m, wall_seconds))
    }

    fn line(&mut self, s: &str) -> Result<(), CliError> {
        writeln!(self.out, "{s}")
            .and_then(|_| self.out.flush())
            .map_err(|e| CliError::io(&self.path, e))
    }
}
