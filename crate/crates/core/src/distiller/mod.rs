//! Student/teacher self-distillation: the pre-training step, the EMA teacher,
//! schedules, checkpoints and the resumable epoch loop.

pub mod checkpoint;
pub mod metrics;
pub mod optim;
pub mod schedule;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{sample_two_views, AugmentConfig, ViewPair};
use crate::encoder::{init_student_params, project_heads, Encoder, EncoderConfig, TEACHER_PREFIXES};
use crate::error::{Error, Result};
use crate::nn::{index_tensor, Params, Trainable};
use crate::seed::derive_seed;
use crate::ssl_objectives::{
    symmetrized_total, update_center, LossReport, LossWeights, Sharpening, StudentView, TeacherView, ViewTarget,
};
use crate::tokenizer::{mask_tensor, sample_mask, token_to_mask_cell, MaskVector};
use crate::volume_io::Volume;
use checkpoint::{add_section, load_checkpoint, save_checkpoint, section, Checkpoint};
use metrics::{MetricsLog, StepRecord};
use optim::{AdamW, AdamWConfig};
use schedule::{lr_schedule, ScheduleConfig};

/// Everything that defines a pre-training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub encoder: EncoderConfig,
    pub schedule: ScheduleConfig,
    pub optimizer: AdamWConfig,
    pub w_mip: f64,
    pub lambda_mpd: f64,
    pub lambda_itd: f64,
    pub mask_ratio: f64,
    /// View pairs per optimizer step.
    pub batch_size: usize,
    pub center_rate: f64,
    pub flip_prob: f64,
    pub jitter: f32,
    /// Per-epoch checkpoints retained besides the best one.
    pub keep_last: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            schedule: ScheduleConfig::default(),
            optimizer: AdamWConfig::default(),
            w_mip: 1.0,
            lambda_mpd: 0.1,
            lambda_itd: 0.1,
            mask_ratio: 0.7,
            batch_size: 4,
            center_rate: 0.9,
            flip_prob: 0.0,
            jitter: 0.0,
            keep_last: 3,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            mip: self.w_mip,
            mpd: self.lambda_mpd,
            itd: self.lambda_itd,
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            view_size: self.encoder.view_size,
            granularity: self.encoder.patch_size * self.encoder.mask_grid_downsample,
            flip_prob: self.flip_prob,
            jitter: self.jitter,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::InvalidArgument(format!("mask_ratio {} outside [0, 1]", self.mask_ratio)));
        }
        if !(0.0..1.0).contains(&self.center_rate) {
            return Err(Error::InvalidArgument(format!("center_rate {} outside [0, 1)", self.center_rate)));
        }
        Ok(())
    }

    /// Whether any distillation term is active (otherwise the teacher is idle).
    pub fn uses_teacher(&self) -> bool {
        self.lambda_mpd != 0.0 || self.lambda_itd != 0.0
    }
}

/// `θ_t ← λ θ_t + (1 − λ) θ_s` for every teacher entry, evaluated in `f64`
/// and rounded once to the storage type.
pub fn ema_update(teacher: &mut Params, student: &Params, lambda_m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda_m) {
        return Err(Error::InvalidArgument(format!("momentum {lambda_m} outside [0, 1]")));
    }
    let names: Vec<String> = teacher.names().cloned().collect();
    for name in names {
        let t = teacher.get(&name)?;
        let s = student.get(&name)?;
        if t.dims() != s.dims() {
            return Err(Error::Shape(format!("{name}: teacher {:?} vs student {:?}", t.dims(), s.dims())));
        }
        let mixed = ((t.to_dtype(DType::F64)? * lambda_m)? + (s.detach().to_dtype(DType::F64)? * (1.0 - lambda_m))?)?;
        let updated = mixed.to_dtype(t.dtype())?;
        teacher.insert(name, updated);
    }
    Ok(())
}

/// Complete mutable training state.
#[derive(Debug, Clone)]
pub struct DistillState {
    pub student: Trainable,
    pub teacher: Params,
    pub patch_center: Tensor,
    pub cls_center: Tensor,
    pub optimizer: AdamW,
    /// Optimizer steps taken.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub best_l_total: Option<f64>,
}

impl DistillState {
    pub fn init(cfg: &PretrainConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let params = init_student_params(&cfg.encoder, cfg.seed, dtype)?;
        let teacher = params.subset_copy(&TEACHER_PREFIXES)?;
        let student = Trainable::from_params(&params)?;
        let k = cfg.encoder.proj_dim;
        Ok(Self {
            optimizer: AdamW::new(cfg.optimizer.clone(), &student)?,
            student,
            teacher,
            patch_center: Tensor::zeros(k, dtype, &Device::Cpu)?,
            cls_center: Tensor::zeros(k, dtype, &Device::Cpu)?,
            step: 0,
            epoch: 0,
            best_l_total: None,
        })
    }

    /// Checks the stop-gradient contract: teacher entries are plain tensors
    /// that share no storage with the student and are not optimizer targets.
    pub fn audit(&self) -> Result<()> {
        for (name, t) in self.teacher.iter() {
            if t.is_variable() {
                return Err(Error::InvalidArgument(format!("teacher {name} is trainable")));
            }
            if let Some(v) = self.student.get(name) {
                if v.as_tensor().id() == t.id() {
                    return Err(Error::InvalidArgument(format!("teacher {name} aliases the student")));
                }
            }
        }
        let student_ids: Vec<_> = self.student.vars().map(|(_, v)| v.as_tensor().id()).collect();
        if self.teacher.iter().any(|(_, t)| student_ids.contains(&t.id())) {
            return Err(Error::InvalidArgument("teacher aliases a student variable".into()));
        }
        if self.optimizer.param_names().any(|n| self.student.get(n).is_none()) {
            return Err(Error::InvalidArgument("optimizer tracks a non-student parameter".into()));
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, cfg: &PretrainConfig) -> Result<Checkpoint> {
        let mut tensors = Params::new();
        add_section(&mut tensors, "student", &self.student.snapshot()?);
        add_section(&mut tensors, "teacher", &self.teacher);
        add_section(&mut tensors, "adam", &self.optimizer.state());
        tensors.insert("center/patch", self.patch_center.clone());
        tensors.insert("center/cls", self.cls_center.clone());
        Ok(Checkpoint {
            tensors,
            config: serde_json::to_value(cfg)?,
            step: self.step,
            meta: serde_json::json!({
                "kind": "pretrain",
                "epoch": self.epoch,
                "adam_t": self.optimizer.t,
                "best_l_total": self.best_l_total,
            }),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint, cfg: &PretrainConfig) -> Result<Self> {
        let dtype = ck.tensors.get("center/patch")?.dtype();
        let mut state = Self::init(cfg, dtype)?;
        let student = section(&ck.tensors, "student");
        let loaded = state.student.load_matching(&student)?;
        if loaded != state.student.vars().count() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {loaded} of {} student parameters",
                state.student.vars().count()
            )));
        }
        state.teacher = section(&ck.tensors, "teacher");
        for name in state.teacher.names() {
            if !name.starts_with(TEACHER_PREFIXES[0]) && !name.starts_with(TEACHER_PREFIXES[1]) {
                return Err(Error::Checkpoint(format!("unexpected teacher entry {name}")));
            }
        }
        let adam_t = ck.meta["adam_t"].as_u64().unwrap_or(0);
        state.optimizer.load_state(&section(&ck.tensors, "adam"), adam_t)?;
        state.patch_center = ck.tensors.get("center/patch")?.clone();
        state.cls_center = ck.tensors.get("center/cls")?.clone();
        state.step = ck.step;
        state.epoch = ck.meta["epoch"].as_u64().unwrap_or(0) as usize;
        state.best_l_total = ck.meta["best_l_total"].as_f64();
        Ok(state)
    }
}

/// Scheduled scalars for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule {
    pub lr: f64,
    pub lambda_m: f64,
    pub tau_t: f64,
}

/// A batch of view pairs laid out as tensors.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    /// Clean views `u` and `v`, each `(B, S³)`.
    pub views: [Tensor; 2],
    /// Per-view masks on the mask grid `(B, N_out)`.
    pub masks: [Tensor; 2],
    /// The same masks broadcast to patch tokens `(B, N)`.
    pub token_masks: [Tensor; 2],
}

/// The two masks used for a view pair, derived from its seed.
pub fn pair_masks(pair: &ViewPair, n_mask: usize, ratio: f64) -> Result<(MaskVector, MaskVector)> {
    Ok((
        sample_mask(n_mask, ratio, derive_seed(&[pair.rng_seed, 1]))?,
        sample_mask(n_mask, ratio, derive_seed(&[pair.rng_seed, 2]))?,
    ))
}

/// Stacks `(S³)` volumes into a `(B, S³)` tensor.
pub fn stack_views(views: &[&Volume], dtype: DType) -> Result<Tensor> {
    let n = views.first().map_or(0, |v| v.data().len());
    let mut flat = Vec::with_capacity(n * views.len());
    for v in views {
        flat.extend_from_slice(v.data());
    }
    Ok(Tensor::from_vec(flat, (views.len(), n), &Device::Cpu)?.to_dtype(dtype)?)
}

impl PreparedBatch {
    pub fn new(enc: &EncoderConfig, pairs: &[ViewPair], masks: &[(MaskVector, MaskVector)], dtype: DType) -> Result<Self> {
        let cells = index_tensor(&token_to_mask_cell(enc.token_grid(), enc.mask_grid_downsample)?)?;
        let us: Vec<&Volume> = pairs.iter().map(|p| &p.u.data).collect();
        let vs: Vec<&Volume> = pairs.iter().map(|p| &p.v.data).collect();
        let mu = mask_tensor(&masks.iter().map(|m| &m.0).collect::<Vec<_>>(), dtype)?;
        let mv = mask_tensor(&masks.iter().map(|m| &m.1).collect::<Vec<_>>(), dtype)?;
        if mu.dim(1)? != enc.num_final_tokens() {
            return Err(Error::Geometry(format!(
                "mask of {} cells for a final grid of {} tokens",
                mu.dim(1)?,
                enc.num_final_tokens()
            )));
        }
        Ok(Self {
            views: [stack_views(&us, dtype)?, stack_views(&vs, dtype)?],
            token_masks: [mu.index_select(&cells, 1)?, mv.index_select(&cells, 1)?],
            masks: [mu, mv],
        })
    }

    pub fn batch_size(&self) -> usize {
        self.views[0].dim(0).unwrap_or(0)
    }
}

/// Output of [`compute_loss`].
pub struct LossEval {
    pub total: Tensor,
    pub report: LossReport,
    pub teacher: [TeacherView; 2],
}

/// Student on masked views, teacher on clean views, symmetrized total.
#[allow(clippy::too_many_arguments)]
pub fn compute_loss(
    encoder: &Encoder,
    student: &Params,
    teacher: &Params,
    centers: (&Tensor, &Tensor),
    batch: &PreparedBatch,
    cfg: &PretrainConfig,
    tau_t: f64,
) -> Result<LossEval> {
    let mut students = Vec::with_capacity(2);
    let mut teachers = Vec::with_capacity(2);
    let mut targets = Vec::with_capacity(2);
    let (b, k, n_out) = (batch.batch_size(), cfg.encoder.proj_dim, cfg.encoder.num_final_tokens());
    for i in 0..2 {
        let out = encoder.forward(student, &batch.views[i], Some(&batch.token_masks[i]))?;
        let (patch_logits, cls_logits) = project_heads(student, &out)?;
        students.push(StudentView {
            pred_blocks: encoder.predict_pixels(student, &out)?,
            patch_logits,
            cls_logits,
        });
        teachers.push(if cfg.uses_teacher() {
            let t_out = encoder.forward(teacher, &batch.views[i], None)?;
            let (p, c) = project_heads(teacher, &t_out)?;
            TeacherView {
                patch_logits: p.detach(),
                cls_logits: c.detach(),
            }
        } else {
            let dtype = batch.views[i].dtype();
            TeacherView {
                patch_logits: Tensor::zeros((b, n_out, k), dtype, &Device::Cpu)?,
                cls_logits: Tensor::zeros((b, k), dtype, &Device::Cpu)?,
            }
        });
        targets.push(ViewTarget {
            blocks: encoder.views_to_blocks(&batch.views[i])?,
            mask: batch.masks[i].clone(),
        });
    }
    let sharpening = Sharpening {
        tau_s: cfg.schedule.tau_s,
        tau_t,
        patch_center: Some(centers.0.clone()),
        cls_center: Some(centers.1.clone()),
    };
    let (total, report) = symmetrized_total(
        [&students[0], &students[1]],
        [&teachers[0], &teachers[1]],
        [&targets[0], &targets[1]],
        &cfg.loss_weights(),
        &sharpening,
    )?;
    let t1 = teachers.pop().expect("two views");
    let t0 = teachers.pop().expect("two views");
    Ok(LossEval {
        total,
        report,
        teacher: [t0, t1],
    })
}

/// One optimizer step followed by the teacher and centre updates.
pub fn pretrain_step(
    state: &mut DistillState,
    encoder: &Encoder,
    batch: &PreparedBatch,
    cfg: &PretrainConfig,
    sched: StepSchedule,
) -> Result<(LossReport, f64)> {
    let diverged = |detail: String| Error::Diverged {
        step: state.step,
        detail,
    };
    let student = state.student.params();
    let eval = compute_loss(
        encoder,
        &student,
        &state.teacher,
        (&state.patch_center, &state.cls_center),
        batch,
        cfg,
        sched.tau_t,
    )
    .map_err(|e| match e {
        Error::NonFinite(d) => diverged(d),
        other => other,
    })?;
    if !eval.report.l_total.is_finite() {
        return Err(diverged(format!("{:?}", eval.report)));
    }
    let grads = eval.total.backward()?;
    let grad_norm = state.optimizer.step(&state.student, &grads, sched.lr)?;
    if !grad_norm.is_finite() {
        return Err(diverged(format!("gradient norm {grad_norm}; {:?}", eval.report)));
    }
    if cfg.uses_teacher() {
        ema_update(&mut state.teacher, &state.student.params(), sched.lambda_m)?;
        let [t0, t1] = &eval.teacher;
        let patch = Tensor::cat(&[&t0.patch_logits, &t1.patch_logits], 0)?;
        let cls = Tensor::cat(&[&t0.cls_logits, &t1.cls_logits], 0)?;
        state.patch_center = update_center(&state.patch_center, &patch, cfg.center_rate)?;
        state.cls_center = update_center(&state.cls_center, &cls, cfg.center_rate)?;
    }
    state.step += 1;
    Ok((eval.report, grad_norm))
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("epoch_{epoch:04}"))
    }

    pub fn best_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("best")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.root.join("final")
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from this checkpoint directory.
    pub resume: Option<PathBuf>,
    /// Stop once this many epochs are complete (the schedule still spans all epochs).
    pub stop_after_epochs: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Latest checkpoint written (`final/` when the run completed).
    pub checkpoint: PathBuf,
    pub completed: bool,
    pub state: DistillState,
}

/// Volume visiting order for an epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, epoch as u64, 0x0E])));
    order
}

pub fn steps_per_epoch(n_volumes: usize, batch_size: usize) -> u64 {
    n_volumes.div_ceil(batch_size) as u64
}

/// Writes `value` as pretty JSON, used to echo effective configurations.
pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

/// Runs (or resumes) pre-training on `volumes`, writing metrics and
/// checkpoints under `out`.
pub fn pretrain(cfg: &PretrainConfig, volumes: &[Volume], out: impl AsRef<Path>, opts: &RunOptions) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if volumes.is_empty() {
        return Err(Error::InvalidArgument("pre-training needs at least one volume".into()));
    }
    let layout = RunLayout::new(out.as_ref());
    fs::create_dir_all(&layout.root).map_err(|e| Error::io(&layout.root, e))?;
    write_json(&layout.config(), cfg)?;

    let mut state = match &opts.resume {
        Some(dir) => {
            let ck = load_checkpoint(dir)?;
            let stored: PretrainConfig = serde_json::from_value(ck.config.clone())?;
            if stored != *cfg {
                return Err(Error::Checkpoint(format!("{} was written with a different configuration", dir.display())));
            }
            DistillState::from_checkpoint(&ck, cfg)?
        }
        None => DistillState::init(cfg, DType::F32)?,
    };
    let encoder = Encoder::new(&cfg.encoder, state.patch_center.dtype())?;
    let aug = cfg.augment();
    let per_epoch = steps_per_epoch(volumes.len(), cfg.batch_size);
    let total_steps = per_epoch * cfg.schedule.epochs as u64;
    let warmup_steps = per_epoch * cfg.schedule.warmup_epochs as u64;
    let n_mask = cfg.encoder.num_final_tokens();
    let mut log = MetricsLog::open(layout.metrics(), state.step)?;
    let started = Instant::now();
    let last_epoch = opts.stop_after_epochs.map_or(cfg.schedule.epochs, |e| e.min(cfg.schedule.epochs));
    let mut latest = None;

    while state.epoch < last_epoch {
        let epoch = state.epoch;
        let tau_t = cfg.schedule.tau_t(epoch);
        let mut epoch_total = 0.0;
        let mut epoch_steps = 0;
        for chunk in epoch_order(volumes.len(), cfg.seed, epoch).chunks(cfg.batch_size) {
            let pairs = chunk
                .iter()
                .map(|&i| sample_two_views(&volumes[i], &aug, derive_seed(&[cfg.seed, epoch as u64, i as u64])))
                .collect::<Result<Vec<_>>>()?;
            let masks = pairs
                .iter()
                .map(|p| pair_masks(p, n_mask, cfg.mask_ratio))
                .collect::<Result<Vec<_>>>()?;
            let batch = PreparedBatch::new(&cfg.encoder, &pairs, &masks, state.patch_center.dtype())?;
            let sched = StepSchedule {
                lr: lr_schedule(state.step, total_steps, warmup_steps, cfg.schedule.lr0),
                lambda_m: cfg.schedule.momentum(state.step, total_steps)?,
                tau_t,
            };
            let step = state.step;
            let (report, grad_norm) = match pretrain_step(&mut state, &encoder, &batch, cfg, sched) {
                Ok(r) => r,
                Err(e) => {
                    let _ = write_json(
                        &layout.root.join("divergence.json"),
                        &serde_json::json!({"step": step, "epoch": epoch, "error": e.to_string()}),
                    );
                    return Err(e);
                }
            };
            log.append(&StepRecord {
                step,
                epoch,
                lr: sched.lr,
                lambda_m: sched.lambda_m,
                tau_t,
                grad_norm,
                report,
                wall_time_s: started.elapsed().as_secs_f64(),
            })?;
            epoch_total += report.l_total;
            epoch_steps += 1;
        }
        log.flush()?;
        state.epoch += 1;
        let mean_total = epoch_total / epoch_steps as f64;
        log::info!("epoch {}/{}: mean l_total {mean_total:.5}", state.epoch, cfg.schedule.epochs);
        let is_best = state.best_l_total.is_none_or(|b| mean_total < b);
        if is_best {
            state.best_l_total = Some(mean_total);
        }
        let ck = state.to_checkpoint(cfg)?;
        let dir = save_checkpoint(layout.epoch_checkpoint(state.epoch), &ck)?;
        if is_best {
            save_checkpoint(layout.best_checkpoint(), &ck)?;
        }
        if state.epoch > cfg.keep_last {
            let stale = layout.epoch_checkpoint(state.epoch - cfg.keep_last);
            if stale.exists() {
                fs::remove_dir_all(&stale).map_err(|e| Error::io(&stale, e))?;
            }
        }
        latest = Some(dir);
    }
    log.flush()?;

    let completed = state.epoch >= cfg.schedule.epochs;
    let checkpoint = if completed {
        save_checkpoint(layout.final_checkpoint(), &state.to_checkpoint(cfg)?)?
    } else {
        match latest {
            Some(dir) => dir,
            None => save_checkpoint(layout.epoch_checkpoint(state.epoch), &state.to_checkpoint(cfg)?)?,
        }
    };
    Ok(PretrainOutcome {
        checkpoint,
        completed,
        state,
    })
}

/// Student parameters (`enc.*`, heads, mask token) from any checkpoint.
pub fn load_student(dir: impl AsRef<Path>) -> Result<(Params, serde_json::Value)> {
    let ck = load_checkpoint(dir)?;
    Ok((section(&ck.tensors, "student"), ck.config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_io::{generate_phantoms, PhantomSpec};

    fn tiny_config() -> PretrainConfig {
        PretrainConfig {
            encoder: EncoderConfig {
                view_size: 16,
                patch_size: 2,
                embed_dim: 16,
                depths: vec![1, 1],
                num_heads: vec![2, 2],
                proj_dim: 32,
                ..EncoderConfig::desk()
            },
            schedule: ScheduleConfig {
                lr0: 1e-3,
                epochs: 3,
                warmup_epochs: 1,
                tau_t_warmup_epochs: 1,
                ..ScheduleConfig::default()
            },
            batch_size: 2,
            ..PretrainConfig::default()
        }
    }

    fn volumes(n: usize) -> Vec<Volume> {
        let specs: Vec<PhantomSpec> = (0..n)
            .map(|i| PhantomSpec {
                size: [20, 20, 20],
                num_blobs: 2,
                seed: i as u64,
                noise_std: 0.02,
                bias_field: false,
            })
            .collect();
        generate_phantoms(&specs).unwrap().into_iter().map(|(v, _)| v).collect()
    }

    fn batch(cfg: &PretrainConfig, vols: &[Volume], seed: u64) -> PreparedBatch {
        let pairs: Vec<ViewPair> = vols
            .iter()
            .enumerate()
            .map(|(i, v)| sample_two_views(v, &cfg.augment(), seed + i as u64).unwrap())
            .collect();
        let masks: Vec<_> = pairs
            .iter()
            .map(|p| pair_masks(p, cfg.encoder.num_final_tokens(), cfg.mask_ratio).unwrap())
            .collect();
        PreparedBatch::new(&cfg.encoder, &pairs, &masks, DType::F32).unwrap()
    }

    #[test]
    fn ema_examples() {
        let mk = |v: f64| {
            let mut p = Params::new();
            p.insert("enc.x", Tensor::new(&[v as f32, 2.0 * v as f32], &Device::Cpu).unwrap());
            p
        };
        let mut t = mk(1.0);
        ema_update(&mut t, &mk(0.0), 0.996).unwrap();
        assert!((t.values_f64("enc.x").unwrap()[0] - 0.996).abs() < 1e-7);
        let mut t = mk(1.0);
        ema_update(&mut t, &mk(0.3), 0.0).unwrap();
        assert_eq!(t.values_f64("enc.x").unwrap(), mk(0.3).values_f64("enc.x").unwrap());
        let mut t = mk(1.0);
        ema_update(&mut t, &mk(0.3), 1.0).unwrap();
        assert_eq!(t.values_f64("enc.x").unwrap(), mk(1.0).values_f64("enc.x").unwrap());
        assert!(ema_update(&mut t, &mk(0.3), 1.5).is_err());
    }

    #[test]
    fn step_updates_student_only_and_respects_unit_momentum() {
        let cfg = tiny_config();
        let enc = Encoder::new(&cfg.encoder, DType::F32).unwrap();
        let mut state = DistillState::init(&cfg, DType::F32).unwrap();
        state.audit().unwrap();
        let before_teacher = state.teacher.clone();
        let before_student = state.student.snapshot().unwrap();
        let b = batch(&cfg, &volumes(2), 0);
        let sched = StepSchedule {
            lr: 1e-3,
            lambda_m: 1.0,
            tau_t: 0.04,
        };
        let (report, norm) = pretrain_step(&mut state, &enc, &b, &cfg, sched).unwrap();
        assert!(report.l_total.is_finite() && norm > 0.0);
        assert_eq!(state.step, 1);
        for name in before_teacher.names() {
            assert_eq!(
                before_teacher.values_f64(name).unwrap(),
                state.teacher.values_f64(name).unwrap(),
                "{name}"
            );
        }
        let moved = before_student
            .names()
            .filter(|n| before_student.values_f64(n).unwrap() != state.student.snapshot().unwrap().values_f64(n).unwrap())
            .count();
        assert!(moved > 0);
        state.audit().unwrap();
        assert!(state.optimizer.param_names().all(|n| !state.teacher.iter().any(|(t, v)| t == n && v.is_variable())));
    }

    #[test]
    fn steps_are_deterministic() {
        let cfg = tiny_config();
        let enc = Encoder::new(&cfg.encoder, DType::F32).unwrap();
        let vols = volumes(2);
        let run = || {
            let mut s = DistillState::init(&cfg, DType::F32).unwrap();
            let sched = StepSchedule {
                lr: 1e-3,
                lambda_m: 0.99,
                tau_t: 0.04,
            };
            (0..2)
                .map(|i| pretrain_step(&mut s, &enc, &batch(&cfg, &vols, i), &cfg, sched).unwrap().0)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mip_only_skips_the_teacher() {
        let cfg = PretrainConfig {
            lambda_mpd: 0.0,
            lambda_itd: 0.0,
            ..tiny_config()
        };
        let enc = Encoder::new(&cfg.encoder, DType::F32).unwrap();
        let mut state = DistillState::init(&cfg, DType::F32).unwrap();
        let before = state.teacher.clone();
        let sched = StepSchedule {
            lr: 1e-3,
            lambda_m: 0.5,
            tau_t: 0.04,
        };
        let (r, _) = pretrain_step(&mut state, &enc, &batch(&cfg, &volumes(2), 0), &cfg, sched).unwrap();
        assert_eq!(r.l_total, r.l_mip);
        for name in before.names() {
            assert_eq!(before.values_f64(name).unwrap(), state.teacher.values_f64(name).unwrap());
        }
    }

    #[test]
    fn zero_epochs_writes_the_initialization() {
        let cfg = PretrainConfig {
            schedule: ScheduleConfig {
                epochs: 0,
                warmup_epochs: 0,
                ..tiny_config().schedule
            },
            ..tiny_config()
        };
        let dir = tempfile::tempdir().unwrap();
        let out = pretrain(&cfg, &volumes(1), dir.path(), &RunOptions::default()).unwrap();
        assert!(out.completed);
        let (student, _) = load_student(&out.checkpoint).unwrap();
        let init = init_student_params(&cfg.encoder, cfg.seed, DType::F32).unwrap();
        for (name, t) in init.iter() {
            assert_eq!(student.values_f64(name).unwrap(), t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap());
        }
        assert!(dir.path().join("config.json").exists());
    }

    #[test]
    fn resume_reproduces_the_metrics_log() {
        let cfg = tiny_config();
        let vols = volumes(3);
        let full = tempfile::tempdir().unwrap();
        pretrain(&cfg, &vols, full.path(), &RunOptions::default()).unwrap();
        let part = tempfile::tempdir().unwrap();
        let first = pretrain(
            &cfg,
            &vols,
            part.path(),
            &RunOptions {
                stop_after_epochs: Some(1),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(!first.completed);
        pretrain(
            &cfg,
            &vols,
            part.path(),
            &RunOptions {
                resume: Some(first.checkpoint),
                ..Default::default()
            },
        )
        .unwrap();
        let a: Vec<_> = metrics::read_metrics(RunLayout::new(full.path()).metrics())
            .unwrap()
            .iter()
            .map(StepRecord::without_time)
            .collect();
        let b: Vec<_> = metrics::read_metrics(RunLayout::new(part.path()).metrics())
            .unwrap()
            .iter()
            .map(StepRecord::without_time)
            .collect();
        assert_eq!(a.len(), 6);
        assert_eq!(a, b);
        // the last three epoch checkpoints and the best one are kept
        let kept: Vec<_> = (1..=3).map(|e| RunLayout::new(full.path()).epoch_checkpoint(e).exists()).collect();
        assert_eq!(kept, vec![true, true, true]);
        assert!(RunLayout::new(full.path()).best_checkpoint().exists());
    }
}
