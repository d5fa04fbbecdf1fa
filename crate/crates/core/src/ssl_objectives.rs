//! Pretext losses: masked image prediction, masked patch-token distillation,
//! global image-token distillation, and their symmetrized combination.
//!
//! Teacher logits are always detached inside these functions, so no gradient
//! can reach teacher parameters regardless of how the caller built them.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{log_softmax_last, scalar_f64, softmax_last};

/// Temperatures and the optional centre subtracted from teacher logits.
#[derive(Debug, Clone)]
pub struct SharpenParams {
    pub tau_s: f64,
    pub tau_t: f64,
    /// `(K)` centre applied to teacher logits only.
    pub center: Option<Tensor>,
}

impl SharpenParams {
    pub fn new(tau_s: f64, tau_t: f64, center: Option<Tensor>) -> Result<Self> {
        for (name, t) in [("tau_s", tau_s), ("tau_t", tau_t)] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {t}")));
            }
        }
        Ok(Self { tau_s, tau_t, center })
    }
}

/// Relative weights of the three objectives in the total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub mip: f64,
    pub mpd: f64,
    pub itd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mip: 1.0,
            mpd: 0.1,
            itd: 0.1,
        }
    }
}

/// Scalar summary of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_mip: f64,
    pub l_mpd: f64,
    pub l_itd: f64,
    pub l_total: f64,
    pub masked_fraction: f64,
    pub teacher_patch_entropy: f64,
    pub teacher_cls_entropy: f64,
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = scalar_f64(&t.to_dtype(DType::F64)?.sum_all()?)?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} contains non-finite values")))
    }
}

fn centered_scaled(logits: &Tensor, tau: f64, center: Option<&Tensor>) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let x = match center {
        Some(c) => logits.broadcast_sub(c)?,
        None => logits.clone(),
    };
    Ok((x / tau)?)
}

/// `softmax((logits - center) / tau)` over the last axis.
pub fn sharpen(logits: &Tensor, tau: f64, center: Option<&Tensor>) -> Result<Tensor> {
    check_finite(logits, "logits")?;
    softmax_last(&centered_scaled(logits, tau, center)?)
}

/// Log of [`sharpen`], computed without forming the probabilities.
pub fn log_sharpen(logits: &Tensor, tau: f64, center: Option<&Tensor>) -> Result<Tensor> {
    check_finite(logits, "logits")?;
    log_softmax_last(&centered_scaled(logits, tau, center)?)
}

/// Row-wise `-Σ p log q` given `p` and `log q`.
pub fn cross_entropy(p: &Tensor, log_q: &Tensor) -> Result<Tensor> {
    Ok(p.mul(log_q)?.sum(D::Minus1)?.neg()?)
}

/// Row-wise Shannon entropy of `softmax((logits - center) / tau)`.
pub fn entropy(logits: &Tensor, tau: f64, center: Option<&Tensor>) -> Result<Tensor> {
    let log_p = log_sharpen(logits, tau, center)?;
    cross_entropy(&log_p.exp()?, &log_p)
}

fn mask_condition(mask: &Tensor) -> Result<Tensor> {
    Ok(mask.ne(0.0)?)
}

fn masked_mean(values: &Tensor, mask: &Tensor, what: &str) -> Result<Tensor> {
    let count = scalar_f64(&mask.to_dtype(DType::F64)?.sum_all()?)?;
    if count == 0.0 {
        log::warn!("{what}: no masked positions, loss defined as 0");
        return Ok(Tensor::zeros((), values.dtype(), values.device())?);
    }
    let zeros = values.zeros_like()?;
    let cond = mask_condition(mask)?.broadcast_as(values.shape())?;
    let kept = cond.where_cond(values, &zeros)?;
    let per_mask_entry = values.elem_count() / mask.elem_count();
    Ok((kept.sum_all()? / (count * per_mask_entry as f64))?)
}

/// Mean absolute error over voxels of masked blocks.
///
/// `pred` and `target` are `(B, N, V)` voxel blocks, `mask` is `(B, N)` with 1
/// for masked. Unmasked targets never enter the result, even if non-finite.
pub fn mip_loss(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() || pred.rank() != 3 || mask.dims() != &pred.dims()[..2] {
        return Err(Error::Shape(format!(
            "mip_loss: pred {:?}, target {:?}, mask {:?}",
            pred.dims(),
            target.dims(),
            mask.dims()
        )));
    }
    let residual = pred.sub(&target.detach())?;
    let cond = mask_condition(mask)?.unsqueeze(2)?.broadcast_as(pred.shape())?;
    let residual = cond.where_cond(&residual, &residual.zeros_like()?)?;
    masked_mean(&residual.abs()?, &mask.unsqueeze(2)?, "mip_loss")
}

/// Cross-entropy from the sharpened teacher to the sharpened student at masked
/// positions. Logits are `(B, N, K)`, `mask` is `(B, N)`.
pub fn mpd_loss(student: &Tensor, teacher: &Tensor, mask: &Tensor, p: &SharpenParams) -> Result<Tensor> {
    if student.dims() != teacher.dims() || student.rank() != 3 || mask.dims() != &student.dims()[..2] {
        return Err(Error::Shape(format!(
            "mpd_loss: student {:?}, teacher {:?}, mask {:?}",
            student.dims(),
            teacher.dims(),
            mask.dims()
        )));
    }
    let p_t = sharpen(&teacher.detach(), p.tau_t, p.center.as_ref())?;
    let cond = mask_condition(mask)?.unsqueeze(2)?.broadcast_as(student.shape())?;
    let student = cond.where_cond(student, &student.zeros_like()?)?;
    let log_q = log_sharpen(&student, p.tau_s, None)?;
    masked_mean(&cross_entropy(&p_t, &log_q)?, mask, "mpd_loss")
}

/// Cross-entropy between global-token distributions, averaged over the batch.
/// Logits are `(B, K)`.
pub fn itd_loss(student: &Tensor, teacher: &Tensor, p: &SharpenParams) -> Result<Tensor> {
    if student.dims() != teacher.dims() || student.rank() != 2 {
        return Err(Error::Shape(format!(
            "itd_loss: student {:?}, teacher {:?}",
            student.dims(),
            teacher.dims()
        )));
    }
    let p_t = sharpen(&teacher.detach(), p.tau_t, p.center.as_ref())?;
    let log_q = log_sharpen(student, p.tau_s, None)?;
    Ok(cross_entropy(&p_t, &log_q)?.mean_all()?)
}

/// Student outputs for one corrupted view.
#[derive(Debug, Clone)]
pub struct StudentView {
    /// `(B, N, V)` predicted voxel blocks.
    pub pred_blocks: Tensor,
    /// `(B, N, K)`.
    pub patch_logits: Tensor,
    /// `(B, K)`.
    pub cls_logits: Tensor,
}

/// Teacher outputs for one clean view.
#[derive(Debug, Clone)]
pub struct TeacherView {
    pub patch_logits: Tensor,
    pub cls_logits: Tensor,
}

/// Reconstruction target and mask for one view.
#[derive(Debug, Clone)]
pub struct ViewTarget {
    /// `(B, N, V)` clean voxel blocks.
    pub blocks: Tensor,
    /// `(B, N)`, 1 for masked.
    pub mask: Tensor,
}

/// Temperatures plus separate centres for the patch and global heads.
#[derive(Debug, Clone)]
pub struct Sharpening {
    pub tau_s: f64,
    pub tau_t: f64,
    pub patch_center: Option<Tensor>,
    pub cls_center: Option<Tensor>,
}

impl Sharpening {
    fn patch(&self) -> Result<SharpenParams> {
        SharpenParams::new(self.tau_s, self.tau_t, self.patch_center.clone())
    }

    fn cls(&self) -> Result<SharpenParams> {
        SharpenParams::new(self.tau_s, self.tau_t, self.cls_center.clone())
    }
}

/// Symmetrized losses over the two views `(u, v)`.
///
/// Index 0 is `u`, index 1 is `v`: reconstruction and patch distillation pair
/// each corrupted view with its own clean view, global distillation pairs it
/// with the other one. Returns the differentiable total and a report.
pub fn symmetrized_total(
    student: [&StudentView; 2],
    teacher: [&TeacherView; 2],
    targets: [&ViewTarget; 2],
    weights: &LossWeights,
    sharpening: &Sharpening,
) -> Result<(Tensor, LossReport)> {
    let (sp_patch, sp_cls) = (sharpening.patch()?, sharpening.cls()?);
    let half = |a: Tensor, b: Tensor| -> Result<Tensor> { Ok(((a + b)? * 0.5)?) };
    let mip = half(
        mip_loss(&student[0].pred_blocks, &targets[0].blocks, &targets[0].mask)?,
        mip_loss(&student[1].pred_blocks, &targets[1].blocks, &targets[1].mask)?,
    )?;
    let mpd = half(
        mpd_loss(&student[0].patch_logits, &teacher[0].patch_logits, &targets[0].mask, &sp_patch)?,
        mpd_loss(&student[1].patch_logits, &teacher[1].patch_logits, &targets[1].mask, &sp_patch)?,
    )?;
    let itd = half(
        itd_loss(&student[0].cls_logits, &teacher[1].cls_logits, &sp_cls)?,
        itd_loss(&student[1].cls_logits, &teacher[0].cls_logits, &sp_cls)?,
    )?;

    let mut total: Option<Tensor> = None;
    for (w, l) in [(weights.mip, &mip), (weights.mpd, &mpd), (weights.itd, &itd)] {
        if w == 0.0 {
            continue;
        }
        let term = if w == 1.0 { l.clone() } else { (l * w)? };
        total = Some(match total {
            None => term,
            Some(t) => (t + term)?,
        });
    }
    let total = match total {
        Some(t) => t,
        None => Tensor::zeros((), mip.dtype(), mip.device())?,
    };

    let patch_h = Tensor::cat(&[&teacher[0].patch_logits, &teacher[1].patch_logits], 0)?.detach();
    let cls_h = Tensor::cat(&[&teacher[0].cls_logits, &teacher[1].cls_logits], 0)?.detach();
    let masked = Tensor::cat(&[&targets[0].mask, &targets[1].mask], 0)?.to_dtype(DType::F64)?;
    let report = LossReport {
        l_mip: scalar_f64(&mip)?,
        l_mpd: scalar_f64(&mpd)?,
        l_itd: scalar_f64(&itd)?,
        l_total: scalar_f64(&total)?,
        masked_fraction: scalar_f64(&masked.mean_all()?)?,
        teacher_patch_entropy: scalar_f64(
            &entropy(&patch_h, sharpening.tau_t, sharpening.patch_center.as_ref())?.mean_all()?,
        )?,
        teacher_cls_entropy: scalar_f64(
            &entropy(&cls_h, sharpening.tau_t, sharpening.cls_center.as_ref())?.mean_all()?,
        )?,
    };
    if !report.l_total.is_finite() {
        return Err(Error::NonFinite(format!("loss: {report:?}")));
    }
    Ok((total, report))
}

/// `rate · center + (1 - rate) · mean(teacher_logits)` over all leading axes.
pub fn update_center(center: &Tensor, teacher_logits: &Tensor, rate: f64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("centering rate {rate} outside [0, 1)")));
    }
    let k = center.dim(0)?;
    let mean = teacher_logits.detach().reshape(((), k))?.mean(0)?;
    Ok(((center * rate)? + (mean * (1.0 - rate))?)?)
}
