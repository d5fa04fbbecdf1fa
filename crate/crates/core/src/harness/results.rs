//! `results.csv`: one row per experiment cell, appended under an exclusive file lock.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const RESULTS_HEADER: &str = "experiment,value,seed,mean_dice,per_class,mip_mse,wall_clock_s";

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub experiment: String,
    pub value: String,
    pub seed: u64,
    pub mean_dice: f64,
    pub per_class: BTreeMap<u16, f64>,
    /// Masked-voxel reconstruction error on held-out volumes; `None` when undefined.
    pub mip_mse: Option<f64>,
    pub wall_clock_s: f64,
}

/// `1:0.93;2:0.88`, ascending class id.
pub fn format_per_class(per_class: &BTreeMap<u16, f64>) -> String {
    per_class.iter().map(|(k, v)| format!("{k}:{v}")).collect::<Vec<_>>().join(";")
}

pub fn parse_per_class(s: &str) -> Result<BTreeMap<u16, f64>> {
    let bad = || Error::InvalidArgument(format!("malformed per-class field `{s}`"));
    if s.is_empty() {
        return Ok(BTreeMap::new());
    }
    s.split(';')
        .map(|kv| {
            let (k, v) = kv.split_once(':').ok_or_else(bad)?;
            Ok((k.parse().map_err(|_| bad())?, v.parse().map_err(|_| bad())?))
        })
        .collect()
}

impl ResultRow {
    pub fn to_record(&self) -> [String; 7] {
        [
            self.experiment.clone(),
            self.value.clone(),
            self.seed.to_string(),
            self.mean_dice.to_string(),
            format_per_class(&self.per_class),
            self.mip_mse.map_or(String::new(), |m| m.to_string()),
            self.wall_clock_s.to_string(),
        ]
    }

    pub fn from_record(r: &csv::StringRecord) -> Result<Self> {
        let bad = |what: &str| Error::InvalidArgument(format!("results row {r:?}: bad {what}"));
        if r.len() != 7 {
            return Err(bad("field count"));
        }
        Ok(Self {
            experiment: r[0].to_string(),
            value: r[1].to_string(),
            seed: r[2].parse().map_err(|_| bad("seed"))?,
            mean_dice: r[3].parse().map_err(|_| bad("mean_dice"))?,
            per_class: parse_per_class(&r[4])?,
            mip_mse: if r[5].is_empty() {
                None
            } else {
                Some(r[5].parse().map_err(|_| bad("mip_mse"))?)
            },
            wall_clock_s: r[6].parse().map_err(|_| bad("wall_clock_s"))?,
        })
    }

    /// The row with the wall-clock field zeroed, for reproducibility checks.
    pub fn without_time(&self) -> Self {
        Self {
            wall_clock_s: 0.0,
            ..self.clone()
        }
    }
}

/// Appends rows, writing the header first if the file is new or empty.
/// Holds an exclusive lock for the whole write so concurrent workers never
/// interleave rows.
pub fn append_rows(path: &Path, rows: &[ResultRow]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file: File = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    file.lock().map_err(|e| Error::io(path, e))?;
    let empty = file.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
    let mut buf = Vec::new();
    {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(&mut buf);
        if empty {
            w.write_record(RESULTS_HEADER.split(','))
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        }
        for row in rows {
            w.write_record(row.to_record()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    let mut f = &file;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))?;
    file.unlock().map_err(|e| Error::io(path, e))
}

pub fn read_rows(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    if header.join(",") != RESULTS_HEADER {
        return Err(Error::InvalidArgument(format!("{}: unexpected header {header:?}", path.display())));
    }
    r.records()
        .map(|rec| ResultRow::from_record(&rec.map_err(|e| Error::InvalidArgument(e.to_string()))?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(seed: u64) -> ResultRow {
        ResultRow {
            experiment: "MASK_RATIO_SWEEP".into(),
            value: "0.7".into(),
            seed,
            mean_dice: 0.8125,
            per_class: [(1, 0.75), (2, 0.875)].into_iter().collect(),
            mip_mse: if seed == 0 { None } else { Some(0.0123) },
            wall_clock_s: 1.5,
        }
    }

    #[test]
    fn rows_round_trip_with_a_single_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.csv");
        append_rows(&path, &[row(0)]).unwrap();
        append_rows(&path, &[row(1), row(2)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), RESULTS_HEADER);
        assert_eq!(text.lines().filter(|l| l.starts_with("experiment")).count(), 1);
        assert_eq!(read_rows(&path).unwrap(), vec![row(0), row(1), row(2)]);
    }

    #[test]
    fn concurrent_appends_do_not_interleave() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.csv");
        std::thread::scope(|s| {
            for t in 0..4u64 {
                let path = &path;
                s.spawn(move || {
                    for i in 0..10 {
                        append_rows(path, &[row(t * 100 + i)]).unwrap();
                    }
                });
            }
        });
        let rows = read_rows(&path).unwrap();
        assert_eq!(rows.len(), 40);
    }

    #[test]
    fn per_class_field_parses_back() {
        let m: BTreeMap<u16, f64> = [(1, 0.1), (4, 1.0)].into_iter().collect();
        assert_eq!(parse_per_class(&format_per_class(&m)).unwrap(), m);
        assert!(parse_per_class("1=0.3").is_err());
    }
}
