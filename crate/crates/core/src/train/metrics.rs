use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    /// Mean loss over the examples that contributed; `None` if all were
    /// skipped.
    pub loss: Option<f64>,
    pub supervised_loss: Option<f64>,
    pub unsupervised_loss: Option<f64>,
    pub grad_norm: f64,
    pub examples: usize,
    /// Examples whose references were all silent.
    pub skipped: usize,
    pub wall_time_s: f64,
}

/// Line-delimited JSON metrics writer.
#[derive(Debug)]
pub struct MetricsLog {
    out: BufWriter<File>,
}

impl MetricsLog {
    pub fn create(path: impl AsRef<Path>) -> std::io::Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }

    /// Opens for appending (resumed runs).
    pub fn append(path: impl AsRef<Path>) -> std::io::Result<Self> {
        Ok(Self {
            out: BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?),
        })
    }

    pub fn write(&mut self, m: &StepMetrics) -> std::io::Result<()> {
        let line = serde_json::to_string(m).map_err(std::io::Error::other)?;
        writeln!(self.out, "{line}")?;
        self.out.flush()
    }
}
