//! The phantom → pre-train → fine-tune → evaluate pipeline behind every
//! experiment cell, with on-disk caching of completed runs.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::distiller::checkpoint::MANIFEST;
use crate::distiller::{pretrain, write_json, PretrainConfig, RunLayout, RunOptions};
use crate::error::{Error, Result};
use crate::harness::recon::reconstruct_report;
use crate::harness::results::ResultRow;
use crate::seed::derive_seed;
use crate::segmentation::folds::{fnv1a64, kfold_assign};
use crate::segmentation::{evaluate, finetune, mean_dice, mean_per_class, DiceTable, FinetuneConfig};
use crate::volume_io::{generate_phantoms, LabelMap, PhantomSpec, Volume};

/// Synthetic dataset: unlabeled phantoms for pre-training, labeled ones for
/// fine-tuning (`n_train`) and evaluation (`n_test`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub size: usize,
    pub num_blobs: usize,
    pub noise_std: f32,
    pub bias_field: bool,
    pub n_unlabeled: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            size: 40,
            num_blobs: 4,
            noise_std: 0.08,
            bias_field: true,
            n_unlabeled: 200,
            n_train: 5,
            n_test: 15,
            seed: 0,
        }
    }
}

impl DataConfig {
    fn spec(&self, stream: u64, i: usize) -> PhantomSpec {
        PhantomSpec {
            size: [self.size; 3],
            num_blobs: self.num_blobs,
            seed: derive_seed(&[self.seed, stream, i as u64]),
            noise_std: self.noise_std,
            bias_field: self.bias_field,
        }
    }

    pub fn unlabeled_specs(&self) -> Vec<PhantomSpec> {
        (0..self.n_unlabeled).map(|i| self.spec(0xA0, i)).collect()
    }

    /// Test cases come first so that the test set does not change with `n_train`.
    pub fn labeled_specs(&self) -> Vec<PhantomSpec> {
        (0..self.n_test + self.n_train).map(|i| self.spec(0xB0, i)).collect()
    }
}

/// Phantoms of a [`DataConfig`], split into its three roles.
#[derive(Debug)]
pub struct Dataset {
    pub unlabeled: Vec<Volume>,
    pub train: Vec<(Volume, LabelMap)>,
    pub test: Vec<(Volume, LabelMap)>,
}

impl Dataset {
    pub fn generate(cfg: &DataConfig) -> Result<Self> {
        let unlabeled = generate_phantoms(&cfg.unlabeled_specs())?.into_iter().map(|(v, _)| v).collect();
        let mut labeled = generate_phantoms(&cfg.labeled_specs())?;
        let train = labeled.split_off(cfg.n_test);
        Ok(Self {
            unlabeled,
            train,
            test: labeled,
        })
    }

    /// Generated once per process and configuration.
    pub fn shared(cfg: &DataConfig) -> Result<Arc<Self>> {
        static CACHE: OnceLock<Mutex<HashMap<u64, Arc<Dataset>>>> = OnceLock::new();
        let key = config_hash(cfg)?;
        let cell = per_key_lock(key);
        let _guard = cell.lock().unwrap_or_else(|e| e.into_inner());
        let cache = CACHE.get_or_init(Default::default);
        if let Some(d) = cache.lock().unwrap_or_else(|e| e.into_inner()).get(&key) {
            return Ok(d.clone());
        }
        let d = Arc::new(Self::generate(cfg)?);
        cache.lock().unwrap_or_else(|e| e.into_inner()).insert(key, d.clone());
        Ok(d)
    }
}

/// One experiment cell: data, pre-training and fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub data: DataConfig,
    /// Pre-train before fine-tuning; otherwise fine-tune from random init.
    pub pretrain_enabled: bool,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    /// Mask ratio of the held-out reconstruction report; the pre-training ratio when unset.
    pub recon_ratio: Option<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            pretrain_enabled: true,
            pretrain: PretrainConfig {
                schedule: crate::distiller::schedule::ScheduleConfig {
                    epochs: 30,
                    warmup_epochs: 3,
                    tau_t_warmup_epochs: 3,
                    lr0: 1e-3,
                    ..Default::default()
                },
                ..Default::default()
            },
            finetune: FinetuneConfig {
                epochs: 60,
                warmup_epochs: 3,
                lr0: 1e-2,
                val_every: 1000,
                ..Default::default()
            },
            recon_ratio: None,
        }
    }
}

impl PipelineConfig {
    /// The configuration actually run for `seed`: model seeds set and the
    /// segmenter's backbone made to match the pre-trained one.
    pub fn for_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.pretrain.seed = seed;
        c.finetune.seed = seed;
        c.finetune.seg.encoder = c.pretrain.encoder.clone();
        c.finetune.init = None;
        c
    }
}

/// Stable content hash of a serializable value.
pub fn config_hash(value: &impl Serialize) -> Result<u64> {
    Ok(fnv1a64(serde_json::to_string(value)?.as_bytes()))
}

/// A process-wide mutex per key, so concurrent workers needing the same run
/// wait for one another instead of duplicating it.
fn per_key_lock(key: u64) -> Arc<Mutex<()>> {
    static LOCKS: OnceLock<Mutex<HashMap<u64, Arc<Mutex<()>>>>> = OnceLock::new();
    LOCKS
        .get_or_init(Default::default)
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .entry(key)
        .or_default()
        .clone()
}

/// Holds both the in-process and the file lock for a cached run directory.
fn lock_run_dir(dir: &Path, key: u64) -> Result<(Arc<Mutex<()>>, File)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(".lock");
    let file = OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    let cell = per_key_lock(key);
    Ok((cell, file))
}

/// Latest `checkpoints/epoch_*` directory of a run, if any.
pub fn latest_epoch_checkpoint(root: &Path) -> Option<PathBuf> {
    let dir = root.join("checkpoints");
    fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("epoch_")) && p.join(MANIFEST).exists()
        })
        .max()
}

/// Runs `run` in `root` unless `root/final` already exists, resuming from
/// the latest epoch checkpoint of an interrupted attempt.
fn cached_run(root: &Path, key: u64, run: impl FnOnce(&RunOptions) -> Result<()>) -> Result<PathBuf> {
    let (cell, file) = lock_run_dir(root, key)?;
    let _guard = cell.lock().unwrap_or_else(|e| e.into_inner());
    file.lock().map_err(|e| Error::io(root, e))?;
    let done = RunLayout::new(root).final_checkpoint();
    let result = if done.join(MANIFEST).exists() {
        Ok(done)
    } else {
        let opts = RunOptions {
            resume: latest_epoch_checkpoint(root),
            stop_after_epochs: None,
        };
        run(&opts).map(|_| done)
    };
    file.unlock().map_err(|e| Error::io(root, e))?;
    result
}

/// Pre-training checkpoint for `cfg` on `data`, computed once under `cache`.
pub fn cached_pretrain(cache: &Path, data: &DataConfig, cfg: &PretrainConfig) -> Result<PathBuf> {
    let key = config_hash(&(data, cfg))?;
    let root = cache.join("pretrain").join(format!("{key:016x}"));
    cached_run(&root, key, |opts| {
        let ds = Dataset::shared(data)?;
        pretrain(cfg, &ds.unlabeled, &root, opts).map(|_| ())
    })
}

/// Fine-tuning checkpoint for `cfg` on `data`, computed once under `cache`.
pub fn cached_finetune(cache: &Path, data: &DataConfig, cfg: &FinetuneConfig) -> Result<PathBuf> {
    let key = config_hash(&(data, cfg))?;
    let root = cache.join("finetune").join(format!("{key:016x}"));
    cached_run(&root, key, |opts| {
        let ds = Dataset::shared(data)?;
        finetune(cfg, &ds.train, &[], &root, opts).map(|_| ())
    })
}

/// Everything one pipeline run measured.
#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub dice: Vec<DiceTable>,
    pub mip_mse: Option<f64>,
    pub pretrain_checkpoint: Option<PathBuf>,
    pub finetune_checkpoint: PathBuf,
}

/// Pre-trains (if enabled), fine-tunes and evaluates the test set, reusing
/// any completed stage found under `cache`.
pub fn run_pipeline(cfg: &PipelineConfig, seed: u64, cache: &Path) -> Result<PipelineResult> {
    let cfg = cfg.for_seed(seed);
    let ds = Dataset::shared(&cfg.data)?;
    let mut ft = cfg.finetune.clone();
    let (pre_ck, mip_mse) = if cfg.pretrain_enabled {
        let ck = cached_pretrain(cache, &cfg.data, &cfg.pretrain)?;
        let held_out: Vec<(String, Volume)> =
            ds.test.iter().enumerate().map(|(i, (v, _))| (format!("test_{i:03}"), v.clone())).collect();
        let ratio = cfg.recon_ratio.unwrap_or(cfg.pretrain.mask_ratio);
        let report = reconstruct_report(&ck, &held_out, ratio, seed, None)?;
        ft.init = Some(ck.clone());
        (Some(ck), report.mean_mse)
    } else {
        (None, None)
    };
    let ft_ck = cached_finetune(cache, &cfg.data, &ft)?;
    let model = crate::segmentation::load_seg_model(&ft_ck)?;
    Ok(PipelineResult {
        dice: evaluate(&model, &ds.test, ft.overlap)?,
        mip_mse,
        pretrain_checkpoint: pre_ck,
        finetune_checkpoint: ft_ck,
    })
}

/// [`run_pipeline`] as a results row.
pub fn pipeline_row(experiment: &str, value: &str, cfg: &PipelineConfig, seed: u64, cache: &Path) -> Result<ResultRow> {
    let started = Instant::now();
    let r = run_pipeline(cfg, seed, cache)?;
    Ok(ResultRow {
        experiment: experiment.to_string(),
        value: value.to_string(),
        seed,
        mean_dice: mean_dice(&r.dice),
        per_class: mean_per_class(&r.dice),
        mip_mse: r.mip_mse,
        wall_clock_s: started.elapsed().as_secs_f64(),
    })
}

/// Held-out Dice of one fold.
#[derive(Debug, Clone, Serialize)]
pub struct FoldResult {
    pub fold: usize,
    pub cases: Vec<String>,
    pub dice: Vec<DiceTable>,
    pub mean_dice: f64,
}

/// k-fold cross-validation of fine-tuning: each fold trains on the others
/// and is scored with sliding-window inference. Fold membership depends only
/// on the case names.
pub fn cross_validate(
    cfg: &FinetuneConfig,
    cases: &[(String, Volume, LabelMap)],
    k: usize,
    out: &Path,
) -> Result<Vec<FoldResult>> {
    let names: Vec<String> = cases.iter().map(|c| c.0.clone()).collect();
    let assign = kfold_assign(&names, k)?;
    let mut folds = Vec::with_capacity(k);
    for fold in 0..k {
        let (held, train): (Vec<_>, Vec<_>) = cases.iter().partition(|c| assign[&c.0] == fold);
        let pairs = |v: &[&(String, Volume, LabelMap)]| v.iter().map(|c| (c.1.clone(), c.2.clone())).collect::<Vec<_>>();
        let outcome = finetune(cfg, &pairs(&train), &[], out.join(format!("fold_{fold}")), &RunOptions::default())?;
        let dice = evaluate(&outcome.model, &pairs(&held), cfg.overlap)?;
        folds.push(FoldResult {
            fold,
            cases: held.iter().map(|c| c.0.clone()).collect(),
            mean_dice: mean_dice(&dice),
            dice,
        });
    }
    write_json(&out.join("cross_validation.json"), &folds)?;
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_split_is_stable_across_train_sizes() {
        let a = DataConfig::default();
        let b = DataConfig { n_train: 9, ..a.clone() };
        assert_eq!(a.labeled_specs()[..a.n_test], b.labeled_specs()[..b.n_test]);
        let seeds: std::collections::BTreeSet<u64> =
            a.unlabeled_specs().iter().chain(&a.labeled_specs()).map(|s| s.seed).collect();
        assert_eq!(seeds.len(), a.n_unlabeled + a.n_test + a.n_train);
    }

    #[test]
    fn seed_specialisation_aligns_backbones() {
        let mut c = PipelineConfig::default();
        c.pretrain.encoder.embed_dim = 16;
        let s = c.for_seed(7);
        assert_eq!(s.pretrain.seed, 7);
        assert_eq!(s.finetune.seed, 7);
        assert_eq!(s.finetune.seg.encoder.embed_dim, 16);
    }

    #[test]
    fn config_hash_tracks_content() {
        let c = PipelineConfig::default();
        assert_eq!(config_hash(&c).unwrap(), config_hash(&c.clone()).unwrap());
        assert_ne!(config_hash(&c).unwrap(), config_hash(&c.for_seed(1)).unwrap());
    }

    #[test]
    fn latest_checkpoint_picks_the_highest_epoch() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(latest_epoch_checkpoint(dir.path()), None);
        for e in [2, 10, 9] {
            let d = dir.path().join("checkpoints").join(format!("epoch_{e:04}"));
            fs::create_dir_all(&d).unwrap();
            fs::write(d.join(MANIFEST), "{}").unwrap();
        }
        assert_eq!(
            latest_epoch_checkpoint(dir.path()).unwrap(),
            dir.path().join("checkpoints").join("epoch_0010")
        );
    }
}
