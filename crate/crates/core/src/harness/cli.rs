//! The `smit` command line. Exit codes: 0 success, 2 usage error, 1 runtime error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::distiller::{pretrain, write_json, PretrainConfig, RunOptions};
use crate::error::{Error, Result};
use crate::harness::config::{resolve, Overrides};
use crate::harness::experiment::{num_workers, run_experiment, ExperimentKind, ExperimentSpec};
use crate::harness::pipeline::{cross_validate, DataConfig, Dataset, PipelineConfig};
use crate::harness::recon::reconstruct_report;
use crate::segmentation::{
    dice_score, finetune, load_seg_model, mean_dice, mean_per_class, sliding_window_infer, DiceTable, FinetuneConfig,
};
use crate::volume_io::{
    load_labels, load_volume, normalize_for_modality, save_labels, save_volume, LabelMap, PhantomSpec, Volume,
};

/// Name of the effective-configuration echo written into output directories.
pub const EFFECTIVE_CONFIG: &str = "effective_config.json";

#[derive(Debug, Parser)]
#[command(name = "smit", about = "Masked image prediction with self-distillation for 3D transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize a labeled phantom dataset in the native format.
    Phantom(PhantomArgs),
    /// Self-supervised pre-training on a directory of volumes.
    Pretrain(PretrainArgs),
    /// Fine-tune a segmenter (optionally from a pre-training checkpoint).
    Finetune(FinetuneArgs),
    /// Sliding-window segmentation of one volume.
    Infer(InferArgs),
    /// Dice tables between predicted and reference label maps.
    Eval(EvalArgs),
    /// Run an ablation experiment and append rows to results.csv.
    Ablate(AblateArgs),
    /// Masked-input reconstructions and their error.
    Reconstruct(ReconstructArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON configuration layered over the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PhantomArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value_t = 40)]
    size: usize,
    #[arg(long, default_value_t = 4)]
    blobs: usize,
    #[arg(long, default_value_t = 0.08)]
    noise: f32,
    /// Disable the smooth multiplicative bias field.
    #[arg(long)]
    no_bias: bool,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    /// Directory of volumes; synthetic phantoms when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    /// Continue from this checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: Common,
    /// Directory of labeled volumes; synthetic phantoms when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Labeled validation volumes.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Pre-training checkpoint supplying the backbone.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Cross-validate over this many folds instead of a single run.
    #[arg(long)]
    folds: Option<usize>,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[command(flatten)]
    common: Common,
    /// Fine-tuning checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    overlap: f64,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Predicted label map, or a directory of them.
    #[arg(long)]
    pred: PathBuf,
    /// Reference label map, or a directory of them.
    #[arg(long)]
    gt: PathBuf,
    /// Write the Dice table as JSON into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    kind: String,
    /// Comma-separated values; the kind's standard sweep when omitted.
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
    /// Comma-separated seeds (`--seed` runs a single one).
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    seeds: Vec<u64>,
}

#[derive(Debug, Args)]
struct ReconstructArgs {
    #[command(flatten)]
    common: Common,
    /// Pre-training checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of volumes; the held-out synthetic phantoms when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Mask ratio; the checkpoint's training ratio when omitted.
    #[arg(long)]
    ratio: Option<f64>,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nSee `smit --help` for usage.");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Phantom(a) => phantom(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Finetune(a) => finetune_cmd(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Reconstruct(a) => reconstruct(a),
    }
}

fn echo(dir: &Path, value: &impl Serialize) -> Result<()> {
    write_json(&dir.join(EFFECTIVE_CONFIG), value)
}

/// A named case of a data directory.
pub struct Case {
    pub name: String,
    pub volume: Volume,
    pub labels: Option<LabelMap>,
}

/// Loads every volume in `dir`: native `<name>.f32` files (with labels from
/// `<name>.labels.u16` when present) and NIfTI files, which are normalized.
/// Cases are sorted by name.
pub fn load_dir(dir: &Path) -> Result<Vec<Case>> {
    let mut cases = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let file = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if let Some(name) = file.strip_suffix(".f32") {
            let labels_path = dir.join(format!("{name}.labels.u16"));
            cases.push(Case {
                name: name.to_string(),
                volume: load_volume(&path)?,
                labels: labels_path.exists().then(|| load_labels(&labels_path)).transpose()?,
            });
        } else if let Some(name) = file.strip_suffix(".nii.gz").or_else(|| file.strip_suffix(".nii")) {
            cases.push(Case {
                name: name.to_string(),
                volume: normalize_for_modality(&load_volume(&path)?)?,
                labels: None,
            });
        }
    }
    cases.sort_by(|a, b| a.name.cmp(&b.name));
    if cases.is_empty() {
        return Err(Error::InvalidArgument(format!("no volumes found in {}", dir.display())));
    }
    Ok(cases)
}

fn labeled(cases: Vec<Case>, dir: &Path) -> Result<Vec<(String, Volume, LabelMap)>> {
    cases
        .into_iter()
        .map(|c| match c.labels {
            Some(l) => Ok((c.name, c.volume, l)),
            None => Err(Error::InvalidArgument(format!("{} in {} has no labels", c.name, dir.display()))),
        })
        .collect()
}

fn synthetic_data(seed: Option<u64>) -> DataConfig {
    DataConfig {
        seed: seed.unwrap_or(0),
        ..DataConfig::default()
    }
}

fn phantom(a: PhantomArgs) -> CliResult<()> {
    let seed = a.common.seed.unwrap_or(0);
    let specs: Vec<PhantomSpec> = (0..a.count)
        .map(|i| PhantomSpec {
            size: [a.size; 3],
            num_blobs: a.blobs,
            seed: crate::seed::derive_seed(&[seed, i as u64]),
            noise_std: a.noise,
            bias_field: !a.no_bias,
        })
        .collect();
    let out = &a.common.out;
    for (i, (spec, (v, l))) in specs.iter().zip(crate::volume_io::generate_phantoms(&specs)?).enumerate() {
        let base = out.join(format!("case_{i:04}"));
        save_volume(&base, &v)?;
        save_labels(&base, &l, v.spacing, v.modality)?;
        debug_assert_eq!(spec.num_classes(), l.num_classes());
    }
    echo(out, &serde_json::json!({"seed": seed, "phantoms": specs}))?;
    println!("wrote {} phantoms to {}", a.count, out.display());
    Ok(())
}

fn pretrain_cmd(a: PretrainArgs) -> CliResult<()> {
    let mut o = Overrides::new();
    o.opt("seed", a.common.seed)?.opt("schedule.epochs", a.epochs)?.opt("mask_ratio", a.mask_ratio)?;
    let cfg: PretrainConfig = resolve(a.common.config.as_deref(), &o)?;
    let volumes: Vec<Volume> = match &a.data {
        Some(dir) => load_dir(dir)?.into_iter().map(|c| c.volume).collect(),
        None => Dataset::generate(&DataConfig {
            n_train: 0,
            n_test: 0,
            ..synthetic_data(a.common.seed)
        })?
        .unlabeled,
    };
    let out = &a.common.out;
    let opts = RunOptions {
        resume: a.resume,
        stop_after_epochs: None,
    };
    let r = pretrain(&cfg, &volumes, out, &opts)?;
    echo(out, &cfg)?;
    println!("checkpoint {}", r.checkpoint.display());
    Ok(())
}

fn finetune_cmd(a: FinetuneArgs) -> CliResult<()> {
    let mut o = Overrides::new();
    o.opt("seed", a.common.seed)?.opt("epochs", a.epochs)?.opt("init", a.init)?;
    let cfg: FinetuneConfig = resolve(a.common.config.as_deref(), &o)?;
    let (train, val): (Vec<(String, Volume, LabelMap)>, Vec<(String, Volume, LabelMap)>) = match &a.data {
        Some(dir) => (
            labeled(load_dir(dir)?, dir)?,
            match &a.val {
                Some(v) => labeled(load_dir(v)?, v)?,
                None => Vec::new(),
            },
        ),
        None => {
            let ds = Dataset::generate(&DataConfig {
                n_unlabeled: 0,
                ..synthetic_data(a.common.seed)
            })?;
            let named = |v: Vec<(Volume, LabelMap)>, tag: &str| {
                v.into_iter()
                    .enumerate()
                    .map(|(i, (v, l))| (format!("{tag}_{i:03}"), v, l))
                    .collect::<Vec<_>>()
            };
            (named(ds.train, "train"), named(ds.test, "test"))
        }
    };
    let out = &a.common.out;
    echo(out, &cfg)?;
    let strip = |v: &[(String, Volume, LabelMap)]| v.iter().map(|c| (c.1.clone(), c.2.clone())).collect::<Vec<_>>();
    if let Some(k) = a.folds {
        if a.resume.is_some() {
            return Err(Failure::Usage("--folds cannot be combined with --resume".into()));
        }
        let folds = cross_validate(&cfg, &train, k, out)?;
        for f in &folds {
            println!("fold {}: mean Dice {:.4} over {} cases", f.fold, f.mean_dice, f.cases.len());
        }
        return Ok(());
    }
    let opts = RunOptions {
        resume: a.resume,
        stop_after_epochs: None,
    };
    let r = finetune(&cfg, &strip(&train), &strip(&val), out, &opts)?;
    if let Some(v) = r.validation.last() {
        println!("validation mean Dice {:.4} at epoch {}", v.mean_dice, v.epoch);
    }
    println!("checkpoint {}", r.checkpoint.display());
    Ok(())
}

fn infer(a: InferArgs) -> CliResult<()> {
    let model = load_seg_model(&a.model)?;
    let volume = load_volume(&a.input)?;
    let labels = sliding_window_infer(&model, &volume, a.overlap)?;
    let out = &a.common.out;
    save_labels(out.join("prediction"), &labels, volume.spacing, volume.modality)?;
    echo(
        out,
        &serde_json::json!({"model": a.model, "input": a.input, "overlap": a.overlap, "config": model.config()}),
    )?;
    println!("wrote {}", out.join("prediction.labels.u16").display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    cases: BTreeMap<String, DiceTable>,
    mean_dice: f64,
    per_class: BTreeMap<u16, f64>,
}

fn label_files(path: &Path) -> Result<Vec<(String, LabelMap)>> {
    if !path.is_dir() {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("case");
        return Ok(vec![(name.trim_end_matches(".labels.u16").to_string(), load_labels(path)?)]);
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(path).map_err(|e| Error::io(path, e))? {
        let p = entry.map_err(|e| Error::io(path, e))?.path();
        if let Some(name) = p.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_suffix(".labels.u16")) {
            out.push((name.to_string(), load_labels(&p)?));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let pred = label_files(&a.pred)?;
    let gt = label_files(&a.gt)?;
    let pairs: Vec<(String, &LabelMap, &LabelMap)> = if a.pred.is_dir() {
        let gt: BTreeMap<&String, &LabelMap> = gt.iter().map(|(n, l)| (n, l)).collect();
        pred.iter()
            .map(|(n, p)| {
                gt.get(n)
                    .map(|g| (n.clone(), p, *g))
                    .ok_or_else(|| Failure::Usage(format!("no reference labels for `{n}`")))
            })
            .collect::<CliResult<_>>()?
    } else {
        match (pred.first(), gt.first()) {
            (Some(p), Some(g)) if gt.len() == 1 => vec![(p.0.clone(), &p.1, &g.1)],
            _ => return Err(Failure::Usage("--pred is a file, so --gt must be a file too".into())),
        }
    };
    if pairs.is_empty() {
        return Err(Failure::Usage("no label maps to compare".into()));
    }
    let mut cases = BTreeMap::new();
    for (name, p, g) in pairs {
        cases.insert(name, dice_score(p, g)?);
    }
    let tables: Vec<DiceTable> = cases.values().cloned().collect();
    let report = EvalReport {
        mean_dice: mean_dice(&tables),
        per_class: mean_per_class(&tables),
        cases,
    };
    for (name, t) in &report.cases {
        println!("{name}\t{:.4}\t{}", t.mean, crate::harness::results::format_per_class(&t.per_class));
    }
    println!("mean Dice {:.4}", report.mean_dice);
    if let Some(dir) = &a.out {
        write_json(&dir.join("dice.json"), &report)?;
        echo(dir, &serde_json::json!({"pred": a.pred, "gt": a.gt}))?;
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> CliResult<()> {
    let kind: ExperimentKind = a.kind.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
    let base: PipelineConfig = resolve(a.common.config.as_deref(), &Overrides::new())?;
    let spec = ExperimentSpec {
        kind,
        values: if a.values.is_empty() { kind.default_values() } else { a.values },
        seeds: a.common.seed.map_or(a.seeds, |s| vec![s]),
        base_config: a.common.config.clone(),
    };
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let out = &a.common.out;
    echo(out, &serde_json::json!({"spec": spec, "base": base}))?;
    let rows = run_experiment(&spec, &base, out, num_workers())?;
    for r in &rows {
        println!("{}\t{}\t{}\t{:.4}\t{}", r.experiment, r.value, r.seed, r.mean_dice, r.mip_mse.map_or("-".into(), |m| format!("{m:.5}")));
    }
    println!("{} rows appended to {}", rows.len(), out.join("results.csv").display());
    Ok(())
}

fn reconstruct(a: ReconstructArgs) -> CliResult<()> {
    let seed = a.common.seed.unwrap_or(0);
    let volumes: Vec<(String, Volume)> = match &a.data {
        Some(dir) => load_dir(dir)?.into_iter().map(|c| (c.name, c.volume)).collect(),
        None => {
            let ds = Dataset::generate(&DataConfig {
                n_unlabeled: 0,
                n_train: 0,
                ..synthetic_data(Some(seed))
            })?;
            ds.test.into_iter().enumerate().map(|(i, (v, _))| (format!("test_{i:03}"), v)).collect()
        }
    };
    let ratio = match a.ratio {
        Some(r) => r,
        None => {
            let manifest = crate::distiller::checkpoint::read_manifest(&a.checkpoint)?;
            manifest.config["mask_ratio"]
                .as_f64()
                .ok_or_else(|| Failure::Usage("checkpoint has no mask ratio; pass --ratio".into()))?
        }
    };
    let out = &a.common.out;
    let report = reconstruct_report(&a.checkpoint, &volumes, ratio, seed, Some(out))?;
    echo(out, &serde_json::json!({"checkpoint": a.checkpoint, "ratio": ratio, "seed": seed}))?;
    for v in &report.volumes {
        println!("{}\t{}", v.name, v.mse.map_or("null".into(), |m| format!("{m:.6}")));
    }
    println!("mean MSE {}", report.mean_mse.map_or("null".into(), |m| format!("{m:.6}")));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_flags_and_subcommands_are_usage_errors() {
        assert_eq!(run_command(["smit", "pretrain", "--bogus", "--out", "/tmp/x"]), 2);
        assert_eq!(run_command(["smit", "frobnicate"]), 2);
        assert_eq!(run_command(["smit"]), 2);
        assert_eq!(run_command(["smit", "--help"]), 0);
    }

    #[test]
    fn bad_ablation_kind_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(run_command(["smit", "ablate", "--kind", "NOPE", "--out", out]), 2);
        assert_eq!(
            run_command(["smit", "ablate", "--kind", "MASK_RATIO_SWEEP", "--values", "2.0", "--out", out]),
            2
        );
    }

    #[test]
    fn missing_inputs_are_runtime_errors() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nothing");
        let m = missing.to_str().unwrap();
        assert_eq!(run_command(["smit", "eval", "--pred", m, "--gt", m]), 1);
    }
}
