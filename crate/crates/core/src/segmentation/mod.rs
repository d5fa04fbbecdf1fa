//! Fine-tuning the retained student into a voxel classifier, Dice
//! evaluation and sliding-window inference.
//!
//! The decoder is UNETR-shaped: final-stage tokens are upsampled with
//! stride-2 transposed convolutions, concatenated with the matching encoder
//! stage, fused pointwise, then upsampled to voxel resolution where the raw
//! intensities join before the class head.

pub mod dice;
pub mod folds;
pub mod sliding;

pub use dice::{dice_score, mean_dice, mean_per_class, DiceTable};
pub use folds::kfold_assign;
pub use sliding::{direct_infer, fuse_logits, sliding_window_infer, window_origins, FusedLogits, VoxelClassifier};

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distiller::checkpoint::{add_section, load_checkpoint, save_checkpoint, section, Checkpoint};
use crate::distiller::metrics::{Indexed, JsonLog};
use crate::distiller::optim::{AdamW, AdamWConfig};
use crate::distiller::schedule::lr_schedule;
use crate::distiller::{epoch_order, load_student, stack_views, steps_per_epoch, write_json, RunLayout, RunOptions};
use crate::encoder::{init_student_params, upsample, DecoderKind, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{gelu, index_tensor, linear, log_softmax_last, scalar_f64, ParamBuilder, Params, Trainable};
use crate::seed::derive_seed;
use crate::volume_io::{LabelMap, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegConfig {
    pub encoder: EncoderConfig,
    /// Including background.
    pub num_classes: usize,
    /// Channels of the token-resolution decoder path.
    pub decoder_width: usize,
    /// Channels of the 3×3×3 convolution over raw intensities that joins
    /// before the class head; 0 disables the branch.
    pub raw_channels: usize,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            num_classes: 5,
            decoder_width: 16,
            raw_channels: 8,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument(format!("num_classes {} < 2", self.num_classes)));
        }
        if self.decoder_width == 0 {
            return Err(Error::InvalidArgument("decoder_width must be positive".into()));
        }
        if !self.encoder.patch_size.is_power_of_two() {
            return Err(Error::Geometry(format!(
                "patch size {} is not a power of two",
                self.encoder.patch_size
            )));
        }
        Ok(())
    }

    /// Widths of the token-to-voxel upsampling layers.
    pub fn voxel_widths(&self) -> Vec<usize> {
        let n = self.encoder.patch_size.trailing_zeros() as usize;
        (0..n).map(|i| (self.decoder_width >> (i + 1)).max(8)).collect()
    }

    fn head_width(&self) -> usize {
        if self.raw_channels > 0 {
            self.decoder_width
        } else {
            self.voxel_widths().last().copied().unwrap_or(self.decoder_width)
        }
    }
}

/// He-initialized affine map (the decoder has no normalization layers).
fn he_linear(b: &mut ParamBuilder, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
    b.trunc_normal(&format!("{prefix}.w"), &[fan_in, fan_out], (2.0 / fan_in as f64).sqrt())?;
    b.constant(&format!("{prefix}.b"), &[fan_out], 0.0)
}

fn he_upsample(b: &mut ParamBuilder, prefix: &str, c_in: usize, c_out: usize) -> Result<()> {
    b.trunc_normal(&format!("{prefix}.w"), &[c_in, 8 * c_out], (2.0 / c_in as f64).sqrt())?;
    b.constant(&format!("{prefix}.b"), &[c_out], 0.0)
}

/// Declares the decoder parameters (`seg.*`).
pub fn declare_seg_decoder(cfg: &SegConfig, b: &mut ParamBuilder) -> Result<()> {
    cfg.validate()?;
    let e = &cfg.encoder;
    let d = cfg.decoder_width;
    let n = e.num_stages();
    for s in (0..n - 1).rev() {
        let c_in = if s + 2 == n { e.stage_dim(s + 1) } else { d };
        he_upsample(b, &format!("seg.up{s}"), c_in, d)?;
        he_linear(b, &format!("seg.fuse{s}"), d + e.stage_dim(s), d)?;
    }
    if n == 1 {
        he_linear(b, "seg.proj", e.stage_dim(0), d)?;
    }
    let mut c_in = d;
    for (i, c_out) in cfg.voxel_widths().into_iter().enumerate() {
        he_upsample(b, &format!("seg.vox{i}"), c_in, c_out)?;
        c_in = c_out;
    }
    if cfg.raw_channels > 0 {
        he_linear(b, "seg.raw_conv", 27, cfg.raw_channels)?;
        he_linear(b, "seg.fuse_raw", c_in + cfg.raw_channels, cfg.decoder_width)?;
    }
    he_linear(b, "seg.head", cfg.head_width(), cfg.num_classes)
}

/// Student backbone plus segmentation decoder.
#[derive(Debug, Clone)]
pub struct SegModel {
    cfg: SegConfig,
    encoder: Encoder,
    params: Params,
    /// 3×3×3 neighbourhood gather on the voxel grid.
    stencil: Tensor,
}

/// Raster indices of the 27 neighbours of every voxel of a `grid³` cube
/// (z-major offsets); neighbours outside the cube map to `grid³`.
pub fn stencil_index(grid: usize) -> Vec<usize> {
    let g = grid as isize;
    let mut out = Vec::with_capacity(grid.pow(3) * 27);
    for z in 0..g {
        for y in 0..g {
            for x in 0..g {
                for dz in -1..=1 {
                    for dy in -1..=1 {
                        for dx in -1..=1 {
                            let (nz, ny, nx) = (z + dz, y + dy, x + dx);
                            let inside = (0..g).contains(&nz) && (0..g).contains(&ny) && (0..g).contains(&nx);
                            out.push(if inside { ((nz * g + ny) * g + nx) as usize } else { grid.pow(3) });
                        }
                    }
                }
            }
        }
    }
    out
}

/// Zero-padded 3×3×3 convolution of `(B, V, C)` raster features; the
/// weight is `(27·C, C_out)` with taps outermost.
pub fn conv3(x: &Tensor, stencil: &Tensor, p: &Params, prefix: &str) -> Result<Tensor> {
    let (b, v, c) = x.dims3()?;
    let zero = Tensor::zeros((b, 1, c), x.dtype(), x.device())?;
    let cols = Tensor::cat(&[x, &zero], 1)?
        .index_select(stencil, 1)?
        .reshape((b, v, 27 * c))?;
    linear(&cols, p, prefix)
}

impl SegModel {
    /// `params` must hold `enc.*` and `seg.*` entries.
    pub fn new(cfg: &SegConfig, params: Params) -> Result<Self> {
        cfg.validate()?;
        let dtype = params.get("seg.head.w")?.dtype();
        let model = Self {
            cfg: cfg.clone(),
            encoder: Encoder::new(&cfg.encoder, dtype)?,
            params,
            stencil: index_tensor(&stencil_index(cfg.encoder.view_size))?,
        };
        let mut expected = ParamBuilder::new(0, dtype);
        crate::encoder::declare_encoder(&cfg.encoder, &mut expected)?;
        declare_seg_decoder(cfg, &mut expected)?;
        for (name, t) in expected.finish().iter() {
            let have = model.params.get(name)?;
            if have.dims() != t.dims() {
                return Err(Error::Shape(format!("{name}: {:?} vs expected {:?}", have.dims(), t.dims())));
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &SegConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// `(B, S³)` views → `(B, S³, C)` logits using parameters `p`.
    pub fn forward(&self, p: &Params, views: &Tensor) -> Result<Tensor> {
        let e = &self.cfg.encoder;
        let out = self.encoder.forward(p, views, None)?;
        let n = e.num_stages();
        let mut x = out.patch_embeddings.clone();
        for s in (0..n - 1).rev() {
            x = gelu(&upsample(&x, p, &format!("seg.up{s}"), e.stage_grid(s + 1))?)?;
            x = Tensor::cat(&[&x, &out.stage_features[s]], 2)?;
            x = gelu(&linear(&x, p, &format!("seg.fuse{s}"))?)?;
        }
        if n == 1 {
            x = gelu(&linear(&x, p, "seg.proj")?)?;
        }
        let mut grid = e.token_grid();
        for i in 0..self.cfg.voxel_widths().len() {
            x = gelu(&upsample(&x, p, &format!("seg.vox{i}"), grid)?)?;
            grid *= 2;
        }
        if self.cfg.raw_channels > 0 {
            // centred so that zero-bias filters start on both sides of the GELU knee
            let centred = (views.unsqueeze(2)? - 0.5)?;
            let raw = gelu(&conv3(&centred, &self.stencil, p, "seg.raw_conv")?)?;
            x = Tensor::cat(&[&x, &raw], 2)?;
            x = gelu(&linear(&x, p, "seg.fuse_raw")?)?;
        }
        linear(&x, p, "seg.head")
    }
}

impl VoxelClassifier for SegModel {
    fn window(&self) -> usize {
        self.cfg.encoder.view_size
    }

    fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    fn dtype(&self) -> DType {
        self.encoder.dtype()
    }

    fn logits(&self, views: &Tensor) -> Result<Tensor> {
        self.forward(&self.params, views)
    }
}

/// `(B, V)` labels → `(B, V, C)` one-hot.
pub fn one_hot(labels: &[&LabelMap], num_classes: usize, dtype: DType) -> Result<Tensor> {
    let v = labels.first().map_or(0, |l| l.labels().len());
    let mut data = vec![0.0f32; labels.len() * v * num_classes];
    for (b, l) in labels.iter().enumerate() {
        if l.labels().len() != v {
            return Err(Error::Shape("label maps of different sizes in one batch".into()));
        }
        for (i, &c) in l.labels().iter().enumerate() {
            if c as usize >= num_classes {
                return Err(Error::LabelRange {
                    label: c as u32,
                    num_classes,
                });
            }
            data[(b * v + i) * num_classes + c as usize] = 1.0;
        }
    }
    Ok(Tensor::from_vec(data, (labels.len(), v, num_classes), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Smoothing of the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;

/// Weighted soft-Dice (over all classes, batch-pooled) plus voxel cross-entropy.
#[derive(Debug, Clone)]
pub struct SegLoss {
    pub total: Tensor,
    pub dice: f64,
    pub ce: f64,
}

pub fn dice_ce_loss(logits: &Tensor, target: &Tensor, dice_weight: f64, ce_weight: f64) -> Result<SegLoss> {
    if logits.dims() != target.dims() {
        return Err(Error::Shape(format!("logits {:?} vs target {:?}", logits.dims(), target.dims())));
    }
    let (b, v, _) = logits.dims3()?;
    let log_p = log_softmax_last(logits)?;
    let ce = ((target * &log_p)?.sum_all()? * (-1.0 / (b * v) as f64))?;
    let p = log_p.exp()?;
    let inter = (&p * target)?.sum((0, 1))?;
    let denom = (p.sum((0, 1))? + target.sum((0, 1))?)?;
    let ratio = ((inter * 2.0)? + DICE_SMOOTH)?.div(&(denom + DICE_SMOOTH)?)?;
    let dice = ratio.mean_all()?.affine(-1.0, 1.0)?;
    let total = ((&dice * dice_weight)? + (&ce * ce_weight)?)?;
    Ok(SegLoss {
        total,
        dice: scalar_f64(&dice)?,
        ce: scalar_f64(&ce)?,
    })
}

/// A random `size³` crop of a labelled case; small cases are padded with
/// background first.
pub fn sample_labeled_crop(volume: &Volume, labels: &LabelMap, size: usize, seed: u64) -> Result<(Volume, LabelMap)> {
    if volume.shape() != labels.shape() {
        return Err(Error::Shape(format!("volume {:?} vs labels {:?}", volume.shape(), labels.shape())));
    }
    let (v, _) = volume.pad_to_at_least([size; 3]);
    let (l, _) = labels.pad_to_at_least([size; 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = v.shape();
    let origin = [0, 1, 2].map(|a| rng.random_range(0..=shape[a] - size));
    Ok((v.crop(origin, [size; 3])?, l.crop(origin, [size; 3])?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub seg: SegConfig,
    /// Pre-training checkpoint for the backbone; `None` trains from random init.
    pub init: Option<PathBuf>,
    pub epochs: usize,
    /// Random crops drawn from every training case per epoch.
    pub crops_per_case: usize,
    pub warmup_epochs: usize,
    pub lr0: f64,
    /// Learning-rate multiplier for the backbone (`enc.*`) relative to the decoder.
    pub encoder_lr_scale: f64,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub dice_weight: f64,
    pub ce_weight: f64,
    /// Sliding-window overlap for validation.
    pub overlap: f64,
    /// Validate every this many epochs (and after the last one).
    pub val_every: usize,
    pub keep_last: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            seg: SegConfig::default(),
            init: None,
            epochs: 100,
            crops_per_case: 4,
            warmup_epochs: 5,
            lr0: 1e-4,
            encoder_lr_scale: 1.0,
            batch_size: 2,
            optimizer: AdamWConfig::default(),
            dice_weight: 1.0,
            ce_weight: 1.0,
            overlap: 0.5,
            val_every: 10,
            keep_last: 3,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.seg.validate()?;
        if self.batch_size == 0 || self.val_every == 0 || self.crops_per_case == 0 {
            return Err(Error::InvalidArgument(
                "batch_size, val_every and crops_per_case must be positive".into(),
            ));
        }
        if !(self.lr0 >= 0.0) || !(self.encoder_lr_scale >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "lr0 {} and encoder_lr_scale {} must be >= 0",
                self.lr0, self.encoder_lr_scale
            )));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::InvalidArgument(format!("overlap {} outside [0, 1)", self.overlap)));
        }
        Ok(())
    }
}

/// Backbone weights from a pre-training checkpoint whose backbone geometry
/// matches `cfg` (projection and pixel heads may differ).
pub fn pretrained_backbone(dir: impl AsRef<Path>, cfg: &EncoderConfig) -> Result<Params> {
    let dir = dir.as_ref();
    let (student, config) = load_student(dir)?;
    let stored: EncoderConfig = serde_json::from_value(config.get("encoder").cloned().unwrap_or_default())
        .map_err(|e| Error::Checkpoint(format!("{}: no encoder configuration ({e})", dir.display())))?;
    // heads are discarded, so only the backbone geometry has to agree
    let backbone = |c: &EncoderConfig| EncoderConfig {
        proj_dim: 0,
        decoder_kind: DecoderKind::OneLayer,
        ..c.clone()
    };
    if backbone(&stored) != backbone(cfg) {
        return Err(Error::Geometry(format!(
            "{} holds a different encoder geometry than requested",
            dir.display()
        )));
    }
    student.subset_copy(&["enc."])
}

/// Initial fine-tuning parameters: backbone (pretrained or random) plus a
/// freshly initialized decoder.
pub fn initial_seg_params(cfg: &FinetuneConfig) -> Result<Params> {
    let e = &cfg.seg.encoder;
    let mut p = match &cfg.init {
        Some(dir) => pretrained_backbone(dir, e)?,
        None => init_student_params(e, derive_seed(&[cfg.seed, 0xE1]), DType::F32)?.subset_copy(&["enc."])?,
    };
    let mut b = ParamBuilder::new(derive_seed(&[cfg.seed, 0xDE]), DType::F32);
    declare_seg_decoder(&cfg.seg, &mut b)?;
    for (name, t) in b.finish().iter() {
        p.insert(name.clone(), t.clone());
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub dice_loss: f64,
    pub ce_loss: f64,
    pub grad_norm: f64,
    pub wall_time_s: f64,
}

impl Indexed for FinetuneRecord {
    fn index(&self) -> u64 {
        self.step
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    /// Completed epochs at evaluation time.
    pub epoch: usize,
    pub mean_dice: f64,
    pub per_class: std::collections::BTreeMap<u16, f64>,
    pub wall_time_s: f64,
}

impl Indexed for ValRecord {
    fn index(&self) -> u64 {
        self.epoch as u64
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneState {
    pub model: Trainable,
    pub optimizer: AdamW,
    pub step: u64,
    pub epoch: usize,
}

impl FinetuneState {
    pub fn init(cfg: &FinetuneConfig) -> Result<Self> {
        let model = Trainable::from_params(&initial_seg_params(cfg)?)?;
        Ok(Self {
            optimizer: AdamW::new(cfg.optimizer.clone(), &model)?,
            model,
            step: 0,
            epoch: 0,
        })
    }

    pub fn to_checkpoint(&self, cfg: &FinetuneConfig) -> Result<Checkpoint> {
        let mut tensors = Params::new();
        add_section(&mut tensors, "model", &self.model.snapshot()?);
        add_section(&mut tensors, "adam", &self.optimizer.state());
        Ok(Checkpoint {
            tensors,
            config: serde_json::to_value(cfg)?,
            step: self.step,
            meta: serde_json::json!({"kind": "finetune", "epoch": self.epoch, "adam_t": self.optimizer.t}),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint, cfg: &FinetuneConfig) -> Result<Self> {
        let model = section(&ck.tensors, "model");
        let trainable = Trainable::from_params(&model)?;
        let mut optimizer = AdamW::new(cfg.optimizer.clone(), &trainable)?;
        optimizer.load_state(&section(&ck.tensors, "adam"), ck.meta["adam_t"].as_u64().unwrap_or(0))?;
        SegModel::new(&cfg.seg, model)?;
        Ok(Self {
            model: trainable,
            optimizer,
            step: ck.step,
            epoch: ck.meta["epoch"].as_u64().unwrap_or(0) as usize,
        })
    }
}

/// Loads the segmentation model stored in a fine-tuning checkpoint.
pub fn load_seg_model(dir: impl AsRef<Path>) -> Result<SegModel> {
    let dir = dir.as_ref();
    let ck = load_checkpoint(dir)?;
    if ck.meta["kind"] != "finetune" {
        return Err(Error::Checkpoint(format!("{} is not a fine-tuning checkpoint", dir.display())));
    }
    let cfg: FinetuneConfig = serde_json::from_value(ck.config)?;
    SegModel::new(&cfg.seg, section(&ck.tensors, "model"))
}

/// Dice of sliding-window predictions on every case.
pub fn evaluate(model: &SegModel, cases: &[(Volume, LabelMap)], overlap: f64) -> Result<Vec<DiceTable>> {
    cases
        .iter()
        .map(|(v, l)| dice_score(&sliding_window_infer(model, v, overlap)?, l))
        .collect()
}

fn check_cases(cases: &[(Volume, LabelMap)], num_classes: usize) -> Result<()> {
    for (v, l) in cases {
        if v.shape() != l.shape() {
            return Err(Error::Shape(format!("volume {:?} vs labels {:?}", v.shape(), l.shape())));
        }
        if let Some(&bad) = l.labels().iter().find(|&&c| c as usize >= num_classes) {
            return Err(Error::LabelRange {
                label: bad as u32,
                num_classes,
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: SegModel,
    pub checkpoint: PathBuf,
    pub completed: bool,
    /// Validation records of this invocation.
    pub validation: Vec<ValRecord>,
}

pub fn validation_log(root: &Path) -> PathBuf {
    root.join("validation.jsonl")
}

/// Trains encoder and decoder on random crops of `train`, validating on
/// `val`. Resumable through `opts` exactly like pre-training.
pub fn finetune(
    cfg: &FinetuneConfig,
    train: &[(Volume, LabelMap)],
    val: &[(Volume, LabelMap)],
    out: impl AsRef<Path>,
    opts: &RunOptions,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("fine-tuning needs at least one labelled case".into()));
    }
    check_cases(train, cfg.seg.num_classes)?;
    check_cases(val, cfg.seg.num_classes)?;
    let layout = RunLayout::new(out.as_ref());
    fs::create_dir_all(&layout.root).map_err(|e| Error::io(&layout.root, e))?;
    write_json(&layout.config(), cfg)?;

    let mut state = match &opts.resume {
        Some(dir) => {
            let ck = load_checkpoint(dir)?;
            let stored: FinetuneConfig = serde_json::from_value(ck.config.clone())?;
            if stored != *cfg {
                return Err(Error::Checkpoint(format!("{} was written with a different configuration", dir.display())));
            }
            FinetuneState::from_checkpoint(&ck, cfg)?
        }
        None => FinetuneState::init(cfg)?,
    };
    let shell = SegModel::new(&cfg.seg, state.model.params())?;
    let size = cfg.seg.encoder.view_size;
    let samples = train.len() * cfg.crops_per_case;
    let per_epoch = steps_per_epoch(samples, cfg.batch_size);
    let total_steps = per_epoch * cfg.epochs as u64;
    let warmup_steps = per_epoch * cfg.warmup_epochs as u64;
    let mut log = JsonLog::<FinetuneRecord>::open(layout.metrics(), state.step)?;
    let mut val_log = JsonLog::<ValRecord>::open(validation_log(&layout.root), state.epoch as u64 + 1)?;
    let started = Instant::now();
    let last_epoch = opts.stop_after_epochs.map_or(cfg.epochs, |e| e.min(cfg.epochs));
    let mut validation = Vec::new();
    let mut latest = None;
    let dtype = state.model.params().get("seg.head.w")?.dtype();

    while state.epoch < last_epoch {
        let epoch = state.epoch;
        for chunk in epoch_order(samples, derive_seed(&[cfg.seed, 0xF7]), epoch).chunks(cfg.batch_size) {
            let crops = chunk
                .iter()
                .map(|&j| {
                    let i = j % train.len();
                    let seed = derive_seed(&[cfg.seed, 0xF7, epoch as u64, j as u64]);
                    sample_labeled_crop(&train[i].0, &train[i].1, size, seed)
                })
                .collect::<Result<Vec<_>>>()?;
            let views = stack_views(&crops.iter().map(|c| &c.0).collect::<Vec<_>>(), dtype)?;
            let target = one_hot(&crops.iter().map(|c| &c.1).collect::<Vec<_>>(), cfg.seg.num_classes, dtype)?;
            let lr = lr_schedule(state.step, total_steps, warmup_steps, cfg.lr0);
            let logits = shell.forward(&state.model.params(), &views)?;
            let loss = dice_ce_loss(&logits, &target, cfg.dice_weight, cfg.ce_weight)?;
            let value = scalar_f64(&loss.total)?;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step: state.step,
                    detail: format!("fine-tuning loss {value}"),
                });
            }
            let grads = loss.total.backward()?;
            let enc_scale = cfg.encoder_lr_scale;
            let grad_norm = state.optimizer.step_scaled(&state.model, &grads, lr, |name| {
                if name.starts_with("enc.") {
                    enc_scale
                } else {
                    1.0
                }
            })?;
            log.append(&FinetuneRecord {
                step: state.step,
                epoch,
                lr,
                loss: value,
                dice_loss: loss.dice,
                ce_loss: loss.ce,
                grad_norm,
                wall_time_s: started.elapsed().as_secs_f64(),
            })?;
            state.step += 1;
        }
        log.flush()?;
        state.epoch += 1;
        if !val.is_empty() && (state.epoch % cfg.val_every == 0 || state.epoch == cfg.epochs) {
            let model = SegModel::new(&cfg.seg, state.model.snapshot()?)?;
            let tables = evaluate(&model, val, cfg.overlap)?;
            let rec = ValRecord {
                epoch: state.epoch,
                mean_dice: mean_dice(&tables),
                per_class: mean_per_class(&tables),
                wall_time_s: started.elapsed().as_secs_f64(),
            };
            log::info!("fine-tune epoch {}/{}: validation Dice {:.4}", state.epoch, cfg.epochs, rec.mean_dice);
            val_log.append(&rec)?;
            val_log.flush()?;
            validation.push(rec);
        }
        let dir = save_checkpoint(layout.epoch_checkpoint(state.epoch), &state.to_checkpoint(cfg)?)?;
        if state.epoch > cfg.keep_last {
            let stale = layout.epoch_checkpoint(state.epoch - cfg.keep_last);
            if stale.exists() {
                fs::remove_dir_all(&stale).map_err(|e| Error::io(&stale, e))?;
            }
        }
        latest = Some(dir);
    }

    let completed = state.epoch >= cfg.epochs;
    let ck = state.to_checkpoint(cfg)?;
    let checkpoint = if completed {
        save_checkpoint(layout.final_checkpoint(), &ck)?
    } else {
        match latest {
            Some(dir) => dir,
            None => save_checkpoint(layout.epoch_checkpoint(state.epoch), &ck)?,
        }
    };
    Ok(FinetuneOutcome {
        model: SegModel::new(&cfg.seg, state.model.snapshot()?)?,
        checkpoint,
        completed,
        validation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distiller::metrics::read_log;
    use crate::volume_io::{generate_phantom, PhantomSpec};

    fn tiny_seg() -> SegConfig {
        SegConfig {
            encoder: EncoderConfig {
                view_size: 16,
                patch_size: 2,
                embed_dim: 16,
                depths: vec![1, 1],
                num_heads: vec![2, 2],
                window: 4,
                mlp_ratio: 2,
                proj_dim: 32,
                ..EncoderConfig::desk()
            },
            num_classes: 3,
            decoder_width: 8,
            raw_channels: 4,
        }
    }

    fn tiny_cfg(epochs: usize) -> FinetuneConfig {
        FinetuneConfig {
            seg: tiny_seg(),
            epochs,
            warmup_epochs: 1,
            lr0: 3e-3,
            val_every: 2,
            ..FinetuneConfig::default()
        }
    }

    fn cases(n: usize, size: usize) -> Vec<(Volume, LabelMap)> {
        (0..n)
            .map(|i| {
                generate_phantom(&PhantomSpec {
                    size: [size; 3],
                    num_blobs: 2,
                    seed: 100 + i as u64,
                    noise_std: 0.02,
                    bias_field: false,
                })
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn logits_have_view_shape_times_classes() {
        for n_stages in [1, 2] {
            let mut seg = tiny_seg();
            seg.encoder.depths.truncate(n_stages);
            seg.encoder.num_heads.truncate(n_stages);
            seg.encoder.mask_grid_downsample = 1 << (n_stages - 1);
            let cfg = FinetuneConfig {
                seg: seg.clone(),
                ..FinetuneConfig::default()
            };
            let model = SegModel::new(&seg, initial_seg_params(&cfg).unwrap()).unwrap();
            let x = Tensor::zeros((2, 16usize.pow(3)), DType::F32, &Device::Cpu).unwrap();
            assert_eq!(model.logits(&x).unwrap().dims(), &[2, 4096, 3]);
        }
    }

    #[test]
    fn conv3_matches_a_direct_stencil_sum() {
        let g = 3;
        let x: Vec<f64> = (0..27).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..27).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut p = Params::new();
        p.insert("c.w", Tensor::from_vec(w.clone(), (27, 1), &Device::Cpu).unwrap());
        p.insert("c.b", Tensor::zeros(1, DType::F64, &Device::Cpu).unwrap());
        let xt = Tensor::from_vec(x.clone(), (1, 27, 1), &Device::Cpu).unwrap();
        let stencil = index_tensor(&stencil_index(g)).unwrap();
        let y = conv3(&xt, &stencil, &p, "c").unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let at = |z: isize, yy: isize, xx: isize| {
            if [z, yy, xx].iter().all(|&c| (0..3).contains(&c)) {
                x[((z * 3 + yy) * 3 + xx) as usize]
            } else {
                0.0
            }
        };
        for (i, &out) in y.iter().enumerate() {
            let (z, yy, xx) = ((i / 9) as isize, ((i / 3) % 3) as isize, (i % 3) as isize);
            let mut want = 0.0;
            let mut k = 0;
            for dz in -1..=1 {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        want += w[k] * at(z + dz, yy + dy, xx + dx);
                        k += 1;
                    }
                }
            }
            assert!((out - want).abs() < 1e-12);
        }
    }

    #[test]
    fn desk_decoder_is_small() {
        let mut b = ParamBuilder::new(0, DType::F32);
        declare_seg_decoder(&SegConfig::default(), &mut b).unwrap();
        assert!(b.finish().num_scalars() < 20_000);
    }

    #[test]
    fn loss_terms_at_perfect_and_uniform_predictions() {
        let labels = LabelMap::new([1, 2, 2], vec![0, 1, 2, 1], 3).unwrap();
        let target = one_hot(&[&labels], 3, DType::F64).unwrap();
        // confident correct logits: both terms vanish
        let sharp = (&target * 50.0).unwrap();
        let l = dice_ce_loss(&sharp, &target, 1.0, 1.0).unwrap();
        assert!(l.ce < 1e-15 && l.dice < 1e-9, "{l:?}");
        // uniform logits: CE = ln 3
        let flat = target.zeros_like().unwrap();
        let l = dice_ce_loss(&flat, &target, 1.0, 1.0).unwrap();
        assert!((l.ce - 3f64.ln()).abs() < 1e-12);
        // dice per class: 2·(n_c/3)/(n/3 + n_c) with n = 4
        let expect: f64 = [1.0, 2.0, 1.0]
            .iter()
            .map(|&nc: &f64| (2.0 * nc / 3.0 + DICE_SMOOTH) / (4.0 / 3.0 + nc + DICE_SMOOTH))
            .sum::<f64>()
            / 3.0;
        assert!((l.dice - (1.0 - expect)).abs() < 1e-12);
        assert!((scalar_f64(&l.total).unwrap() - l.dice - l.ce).abs() < 1e-12);
    }

    #[test]
    fn crops_keep_volume_and_labels_aligned() {
        let (v, l) = &cases(1, 20)[0];
        let (cv, cl) = sample_labeled_crop(v, l, 16, 5).unwrap();
        assert_eq!(cv.shape(), [16; 3]);
        // recover the origin by search and compare labels
        let found = (0..=4).flat_map(|z| (0..=4).flat_map(move |y| (0..=4).map(move |x| [z, y, x]))).find(|&o| {
            v.crop(o, [16; 3]).unwrap() == cv
        });
        let o = found.expect("crop origin");
        assert_eq!(l.crop(o, [16; 3]).unwrap(), cl);
    }

    #[test]
    fn rejects_empty_data_and_out_of_range_labels() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(1);
        assert!(finetune(&cfg, &[], &[], dir.path(), &RunOptions::default()).is_err());
        let mut bad = cases(1, 16);
        let labels = LabelMap::new([16; 3], vec![4; 4096], 5).unwrap();
        bad[0].1 = labels;
        assert!(matches!(
            finetune(&cfg, &bad, &[], dir.path(), &RunOptions::default()),
            Err(Error::LabelRange { .. })
        ));
    }

    #[test]
    fn zero_epochs_return_the_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(0);
        let out = finetune(&cfg, &cases(1, 16), &[], dir.path(), &RunOptions::default()).unwrap();
        let init = initial_seg_params(&cfg).unwrap();
        for (name, t) in init.iter() {
            let a = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let b = out.model.params().get(name).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(a, b, "{name}");
        }
    }

    #[test]
    fn same_seed_gives_identical_validation_and_resume_matches() {
        let data = cases(3, 18);
        let (train, val) = data.split_at(2);
        let cfg = tiny_cfg(4);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = finetune(&cfg, train, val, a.path(), &RunOptions::default()).unwrap();
        let rb = finetune(&cfg, train, val, b.path(), &RunOptions::default()).unwrap();
        let strip = |v: &[ValRecord]| v.iter().map(|r| (r.epoch, r.mean_dice, r.per_class.clone())).collect::<Vec<_>>();
        assert_eq!(ra.validation.len(), 2);
        assert_eq!(strip(&ra.validation), strip(&rb.validation));

        // interrupted run resumed from epoch 2 reproduces the logs
        let c = tempfile::tempdir().unwrap();
        let part = finetune(
            &cfg,
            train,
            val,
            c.path(),
            &RunOptions {
                stop_after_epochs: Some(2),
                ..RunOptions::default()
            },
        )
        .unwrap();
        assert!(!part.completed);
        finetune(
            &cfg,
            train,
            val,
            c.path(),
            &RunOptions {
                resume: Some(part.checkpoint),
                ..RunOptions::default()
            },
        )
        .unwrap();
        let metrics = |d: &Path| {
            read_log::<FinetuneRecord>(RunLayout::new(d).metrics())
                .unwrap()
                .into_iter()
                .map(|r| FinetuneRecord { wall_time_s: 0.0, ..r })
                .collect::<Vec<_>>()
        };
        assert_eq!(metrics(a.path()), metrics(c.path()));
        let vals = |d: &Path| {
            read_log::<ValRecord>(validation_log(d))
                .unwrap()
                .into_iter()
                .map(|r| ValRecord { wall_time_s: 0.0, ..r })
                .collect::<Vec<_>>()
        };
        assert_eq!(vals(a.path()), vals(c.path()));
        let m = load_seg_model(c.path().join("final")).unwrap();
        assert_eq!(m.config(), &cfg.seg);
    }
}
