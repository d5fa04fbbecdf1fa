//! JSON-lines training log: one record per optimizer step.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use std::marker::PhantomData;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssl_objectives::LossReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub lambda_m: f64,
    pub tau_t: f64,
    pub grad_norm: f64,
    #[serde(flatten)]
    pub report: LossReport,
    /// Seconds since the run (or resumed run) started; the only
    /// non-reproducible field.
    pub wall_time_s: f64,
}

impl StepRecord {
    /// The record with its timing field cleared, for reproducibility checks.
    pub fn without_time(&self) -> StepRecord {
        StepRecord {
            wall_time_s: 0.0,
            ..self.clone()
        }
    }
}

/// Records that carry a strictly increasing index (step or epoch).
pub trait Indexed {
    fn index(&self) -> u64;
}

impl Indexed for StepRecord {
    fn index(&self) -> u64 {
        self.step
    }
}

/// Append-only JSON-lines log.
pub struct JsonLog<T> {
    path: PathBuf,
    out: BufWriter<File>,
    _records: PhantomData<T>,
}

pub type MetricsLog = JsonLog<StepRecord>;

impl<T: Serialize + DeserializeOwned + Indexed> JsonLog<T> {
    /// Opens `path` for appending, first dropping any records with
    /// `index >= keep_before` (left over from an interrupted run).
    pub fn open(path: impl AsRef<Path>, keep_before: u64) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if path.exists() {
            let kept: Vec<String> = read_lines::<T>(&path)?
                .into_iter()
                .filter(|(rec, _)| rec.index() < keep_before)
                .map(|(_, line)| line)
                .collect();
            let mut text = kept.join("\n");
            if !text.is_empty() {
                text.push('\n');
            }
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            out: BufWriter::new(file),
            _records: PhantomData,
        })
    }

    pub fn append(&mut self, rec: &T) -> Result<()> {
        let line = serde_json::to_string(rec)?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

impl<T> Drop for JsonLog<T> {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<(T, String)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(&line)?;
        out.push((rec, line));
    }
    Ok(out)
}

/// Every record of a JSON-lines log.
pub fn read_log<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    Ok(read_lines(path.as_ref())?.into_iter().map(|(r, _)| r).collect())
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<StepRecord>> {
    read_log(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: u64) -> StepRecord {
        StepRecord {
            step,
            epoch: 0,
            lr: 1e-4 / 3.0,
            lambda_m: 0.996 + step as f64 * 1e-7,
            tau_t: 0.04,
            grad_norm: 0.1,
            report: LossReport {
                l_mip: 0.1 + 1.0 / 3.0,
                l_mpd: 5.5,
                l_itd: 5.4,
                l_total: 1.5,
                masked_fraction: 0.7,
                teacher_patch_entropy: 5.0,
                teacher_cls_entropy: 5.0,
            },
            wall_time_s: 1.25,
        }
    }

    #[test]
    fn floats_round_trip_and_resume_truncates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        {
            let mut log = MetricsLog::open(&path, 0).unwrap();
            for s in 0..5 {
                log.append(&rec(s)).unwrap();
            }
        }
        let all = read_metrics(&path).unwrap();
        assert_eq!(all, (0..5).map(rec).collect::<Vec<_>>());
        {
            let mut log = MetricsLog::open(&path, 3).unwrap();
            log.append(&rec(3)).unwrap();
        }
        let steps: Vec<u64> = read_metrics(&path).unwrap().iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 1, 2, 3]);
    }
}
