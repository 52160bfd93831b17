use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::LossReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Val,
}

/// One line of the metrics log. Training records describe the batch loss at
/// `step` before its update; validation records describe the model after
/// `step` updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub phase: Phase,
    pub step: u64,
    pub learning_rate: f64,
    pub total: f64,
    pub ce_per_codebook: Vec<f64>,
    pub kl_per_codebook: Vec<f64>,
    pub applied_weights: Vec<f64>,
    pub masked_positions: usize,
    /// Masked-target accuracy per codebook.
    pub accuracy: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_norm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<u64>,
}

impl MetricsRecord {
    pub fn new(phase: Phase, step: u64, learning_rate: f64, report: &LossReport, accuracy: Vec<f64>) -> Self {
        Self {
            phase,
            step,
            learning_rate,
            total: report.total,
            ce_per_codebook: report.ce_per_codebook.clone(),
            kl_per_codebook: report.kl_per_codebook.clone(),
            applied_weights: report.applied_weights.clone(),
            masked_positions: report.masked_positions,
            accuracy,
            grad_norm: None,
            wall_ms: None,
        }
    }

    pub fn mean_accuracy(&self) -> f64 {
        self.accuracy.iter().sum::<f64>() / self.accuracy.len().max(1) as f64
    }
}

pub struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsLog {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let out = BufWriter::new(File::create(&path)?);
        Ok(Self { path, out })
    }

    /// Reopens an existing log for a resumed run, dropping every record the
    /// uninterrupted run would not have written by `step`.
    pub fn resume(path: impl AsRef<Path>, keep: impl Fn(&MetricsRecord) -> bool) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let kept: Vec<MetricsRecord> = if path.exists() {
            read_metrics(&path)?.into_iter().filter(|r| keep(r)).collect()
        } else {
            Vec::new()
        };
        let mut log = Self::create(&path)?;
        for r in &kept {
            log.append(r)?;
        }
        log.flush()?;
        let out = BufWriter::new(OpenOptions::new().append(true).open(&path)?);
        log.out = out;
        Ok(log)
    }

    pub fn append(&mut self, r: &MetricsRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, r)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let f = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(phase: Phase, step: u64) -> MetricsRecord {
        let rep = LossReport {
            ce_per_codebook: vec![1.0],
            kl_per_codebook: vec![0.0],
            applied_weights: vec![1.0],
            total: 1.0,
            masked_positions: 3,
        };
        MetricsRecord::new(phase, step, 1e-3, &rep, vec![0.5])
    }

    #[test]
    fn phase_tag_and_resume_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let mut log = MetricsLog::create(&p).unwrap();
        for s in 0..4 {
            log.append(&rec(Phase::Train, s)).unwrap();
        }
        log.append(&rec(Phase::Val, 4)).unwrap();
        log.flush().unwrap();
        drop(log);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.lines().last().unwrap().contains("\"phase\":\"val\""));
        assert!(!text.contains("wall_ms"));

        let mut log = MetricsLog::resume(&p, |r| r.step < 2).unwrap();
        log.append(&rec(Phase::Train, 2)).unwrap();
        log.flush().unwrap();
        let back = read_metrics(&p).unwrap();
        assert_eq!(back.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 1, 2]);
    }
}
