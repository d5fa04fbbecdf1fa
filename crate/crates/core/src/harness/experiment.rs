//! Ablation experiments: one pipeline per (value, seed) cell, run on a
//! worker pool, each finished row appended to `results.csv`.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::pipeline::{pipeline_row, PipelineConfig};
use crate::harness::results::{append_rows, ResultRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExperimentKind {
    /// Values are pre-training mask ratios.
    MaskRatioSweep,
    /// Values are labeled training-set sizes; a `/scratch` suffix fine-tunes from random init.
    FinetuneSizeSweep,
    /// Values are `ONE_LAYER` / `MULTI_LAYER`.
    DecoderAblation,
    /// Values are objective sets such as `MIP+MPD`, `ALL`, or `NONE` (no pre-training).
    ObjectiveAblation,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::MaskRatioSweep => "MASK_RATIO_SWEEP",
            Self::FinetuneSizeSweep => "FINETUNE_SIZE_SWEEP",
            Self::DecoderAblation => "DECODER_ABLATION",
            Self::ObjectiveAblation => "OBJECTIVE_ABLATION",
        }
    }

    /// Values used when none are given.
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Self::MaskRatioSweep => &["0.1", "0.3", "0.5", "0.7", "0.9"],
            Self::FinetuneSizeSweep => &["1", "3", "5", "1/scratch", "3/scratch", "5/scratch"],
            Self::DecoderAblation => &["ONE_LAYER", "MULTI_LAYER"],
            Self::ObjectiveAblation => &OBJECTIVE_VARIANTS,
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Self::MaskRatioSweep,
            Self::FinetuneSizeSweep,
            Self::DecoderAblation,
            Self::ObjectiveAblation,
        ]
        .into_iter()
        .find(|k| k.name().eq_ignore_ascii_case(s))
        .ok_or_else(|| Error::InvalidArgument(format!("unknown experiment kind `{s}`")))
    }
}

/// The seven loss combinations, `ALL` being the default pipeline.
pub const OBJECTIVE_VARIANTS: [&str; 7] = ["MIP", "MPD", "ITD", "MPD+ITD", "MIP+MPD", "MIP+ITD", "ALL"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub values: Vec<String>,
    pub seeds: Vec<u64>,
    /// Pipeline configuration file the cells start from.
    pub base_config: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidArgument("an experiment needs at least one value and one seed".into()));
        }
        let base = PipelineConfig::default();
        for v in &self.values {
            apply_value(self.kind, v, &base)?;
        }
        Ok(())
    }

    /// `(value, seed)` cells in row order.
    pub fn cells(&self) -> Vec<(String, u64)> {
        self.values
            .iter()
            .flat_map(|v| self.seeds.iter().map(move |&s| (v.clone(), s)))
            .collect()
    }
}

/// The pipeline configuration of one experiment value.
pub fn apply_value(kind: ExperimentKind, value: &str, base: &PipelineConfig) -> Result<PipelineConfig> {
    let bad = |why: &str| Error::InvalidArgument(format!("{} value `{value}`: {why}", kind.name()));
    let mut c = base.clone();
    match kind {
        ExperimentKind::MaskRatioSweep => {
            let r: f64 = value.parse().map_err(|_| bad("not a number"))?;
            if !(0.0..=1.0).contains(&r) {
                return Err(bad("outside [0, 1]"));
            }
            c.pretrain.mask_ratio = r;
        }
        ExperimentKind::FinetuneSizeSweep => {
            let (n, scratch) = match value.strip_suffix("/scratch") {
                Some(n) => (n, true),
                None => (value, false),
            };
            c.data.n_train = n.parse().map_err(|_| bad("not a count"))?;
            if c.data.n_train == 0 {
                return Err(bad("needs at least one training case"));
            }
            c.pretrain_enabled &= !scratch;
        }
        ExperimentKind::DecoderAblation => {
            c.pretrain.encoder.decoder_kind = serde_json::from_value(serde_json::Value::String(value.to_uppercase()))
                .map_err(|_| bad("expected ONE_LAYER or MULTI_LAYER"))?;
        }
        ExperimentKind::ObjectiveAblation => {
            let v = value.to_uppercase();
            if v == "NONE" {
                c.pretrain_enabled = false;
                return Ok(c);
            }
            let terms: Vec<&str> = if v == "ALL" { vec!["MIP", "MPD", "ITD"] } else { v.split('+').collect() };
            if terms.iter().any(|t| !["MIP", "MPD", "ITD"].contains(t)) {
                return Err(bad("terms must be drawn from MIP, MPD, ITD"));
            }
            let on = |t: &str| terms.contains(&t);
            let d = &base.pretrain;
            c.pretrain.w_mip = if on("MIP") { d.w_mip } else { 0.0 };
            c.pretrain.lambda_mpd = if on("MPD") { d.lambda_mpd } else { 0.0 };
            c.pretrain.lambda_itd = if on("ITD") { d.lambda_itd } else { 0.0 };
            c.pretrain_enabled = true;
        }
    }
    Ok(c)
}

/// Worker count from `SMIT_NUM_WORKERS` (default 1).
pub fn num_workers() -> usize {
    std::env::var("SMIT_NUM_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Runs every cell of `spec` on `workers` threads, appending each row to
/// `out/results.csv` as soon as it is ready. Completed pre-training and
/// fine-tuning runs under `out/cache` are reused. Returns rows in cell order.
pub fn run_experiment(spec: &ExperimentSpec, base: &PipelineConfig, out: &Path, workers: usize) -> Result<Vec<ResultRow>> {
    spec.validate()?;
    let cells = spec.cells();
    let configs = cells
        .iter()
        .map(|(v, _)| apply_value(spec.kind, v, base))
        .collect::<Result<Vec<_>>>()?;
    let csv = out.join("results.csv");
    let cache = out.join("cache");
    let next = AtomicUsize::new(0);
    let rows: Mutex<Vec<Option<ResultRow>>> = Mutex::new(vec![None; cells.len()]);
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, cells.len().max(1)) {
            s.spawn(|| loop {
                if failure.lock().unwrap_or_else(|e| e.into_inner()).is_some() {
                    return;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((value, seed)) = cells.get(i) else {
                    return;
                };
                log::info!("{} {value} seed {seed}: running", spec.kind.name());
                let result = pipeline_row(spec.kind.name(), value, &configs[i], *seed, &cache)
                    .and_then(|row| append_rows(&csv, std::slice::from_ref(&row)).map(|_| row));
                match result {
                    Ok(row) => rows.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(row),
                    Err(e) => {
                        failure.lock().unwrap_or_else(|e| e.into_inner()).get_or_insert(e);
                        return;
                    }
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().unwrap_or_else(|e| e.into_inner()) {
        return Err(e);
    }
    Ok(rows
        .into_inner()
        .unwrap_or_else(|e| e.into_inner())
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect())
}
