//! Masked-input reconstruction with a pre-trained student.

use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::distiller::{load_student, stack_views, write_json};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::index_tensor;
use crate::seed::derive_seed;
use crate::tokenizer::{mask_tensor, sample_mask, token_to_mask_cell, MaskVector};
use crate::volume_io::{save_volume, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeRecon {
    pub name: String,
    pub masked_voxels: usize,
    /// Mean squared error over masked voxels; `None` when nothing is masked.
    pub mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub checkpoint: String,
    pub mask_ratio: f64,
    pub seed: u64,
    pub volumes: Vec<VolumeRecon>,
    /// Mean of the defined per-volume errors.
    pub mean_mse: Option<f64>,
}

/// The centred `size³` crop, after padding volumes smaller than `size`.
pub fn central_crop(v: &Volume, size: usize) -> Result<Volume> {
    let (padded, _) = v.pad_to_at_least([size; 3]);
    let s = padded.shape();
    padded.crop([0, 1, 2].map(|a| (s[a] - size) / 2), [size; 3])
}

/// Masks the central crop of every volume at `mask_ratio`, reconstructs it
/// with the checkpoint's student and pixel head, and reports the error on the
/// masked voxels. With `out`, writes `<name>_{input,masked,recon}` volumes and
/// `report.json` there.
pub fn reconstruct_report(
    checkpoint: &Path,
    volumes: &[(String, Volume)],
    mask_ratio: f64,
    seed: u64,
    out: Option<&Path>,
) -> Result<ReconReport> {
    let (student, config) = load_student(checkpoint)?;
    let cfg: EncoderConfig = serde_json::from_value(config.get("encoder").cloned().unwrap_or_default())
        .map_err(|e| Error::Checkpoint(format!("{}: no encoder configuration ({e})", checkpoint.display())))?;
    if !student.names().any(|n| n.starts_with("pred.")) {
        return Err(Error::Checkpoint(format!("{} has no pixel-prediction head", checkpoint.display())));
    }
    let dtype = student.get("enc.patch_embed.w")?.dtype();
    let encoder = Encoder::new(&cfg, dtype)?;
    let cells = index_tensor(&token_to_mask_cell(cfg.token_grid(), cfg.mask_grid_downsample)?)?;
    let n_mask = cfg.num_final_tokens();
    let block = cfg.effective_patch().pow(3);

    let mut rows = Vec::with_capacity(volumes.len());
    for (i, (name, volume)) in volumes.iter().enumerate() {
        let crop = central_crop(volume, cfg.view_size)?;
        let mask = sample_mask(n_mask, mask_ratio, derive_seed(&[seed, i as u64, 0x5E]))?;
        let m = mask_tensor(&[&mask], dtype)?;
        let view = stack_views(&[&crop], dtype)?;
        let out_enc = encoder.forward(&student, &view, Some(&m.index_select(&cells, 1)?))?;
        let pred = encoder.predict_pixels(&student, &out_enc)?;
        let target = encoder.views_to_blocks(&view)?;
        let pred_b = pred.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let target_b = target.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let (mut sum, mut count) = (0.0, 0usize);
        for (cell, _) in mask.bits.iter().enumerate().filter(|(_, &b)| b) {
            for j in cell * block..(cell + 1) * block {
                sum += (pred_b[j] - target_b[j]).powi(2);
                count += 1;
            }
        }
        rows.push(VolumeRecon {
            name: name.clone(),
            masked_voxels: count,
            mse: (count > 0).then(|| sum / count as f64),
        });
        if let Some(dir) = out {
            let recon = encoder.blocks_to_views(&pred)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            let masked = masked_input(&encoder, &crop, &mask)?;
            let like = |data: Vec<f32>| Volume::new(crop.shape(), data, crop.spacing, crop.modality);
            save_volume(dir.join(format!("{name}_input")), &crop)?;
            save_volume(dir.join(format!("{name}_masked")), &like(masked)?)?;
            save_volume(dir.join(format!("{name}_recon")), &like(recon)?)?;
        }
    }
    let defined: Vec<f64> = rows.iter().filter_map(|r| r.mse).collect();
    let report = ReconReport {
        checkpoint: checkpoint.display().to_string(),
        mask_ratio,
        seed,
        mean_mse: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        volumes: rows,
    };
    if let Some(dir) = out {
        write_json(&dir.join("report.json"), &report)?;
    }
    Ok(report)
}

/// The crop with masked blocks zeroed, as the student sees it.
fn masked_input(encoder: &Encoder, crop: &Volume, mask: &MaskVector) -> Result<Vec<f32>> {
    let view = stack_views(&[crop], DType::F32)?;
    let blocks = encoder.views_to_blocks(&view)?;
    let keep: Vec<f32> = mask.bits.iter().map(|&b| if b { 0.0 } else { 1.0 }).collect();
    let n = keep.len();
    let keep = candle_core::Tensor::from_vec(keep, (1, n, 1), blocks.device())?;
    let zeroed = blocks.broadcast_mul(&keep)?;
    Ok(encoder.blocks_to_views(&zeroed)?.flatten_all()?.to_vec1::<f32>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distiller::checkpoint::{add_section, save_checkpoint, Checkpoint};
    use crate::distiller::PretrainConfig;
    use crate::encoder::init_student_params;
    use crate::nn::Params;
    use crate::volume_io::{load_volume, Modality};

    /// A student whose pixel head is identically zero.
    fn zero_head_checkpoint(dir: &Path) -> PretrainConfig {
        let cfg = PretrainConfig::default();
        let mut p = init_student_params(&cfg.encoder, 3, DType::F32).unwrap();
        for name in ["pred.fc.w", "pred.fc.b"] {
            let z = p.get(name).unwrap().zeros_like().unwrap();
            p.insert(name, z);
        }
        let mut tensors = Params::new();
        add_section(&mut tensors, "student", &p);
        save_checkpoint(
            dir,
            &Checkpoint {
                tensors,
                config: serde_json::to_value(&cfg).unwrap(),
                step: 0,
                meta: serde_json::Value::Null,
            },
        )
        .unwrap();
        cfg
    }

    #[test]
    fn zero_ratio_gives_undefined_error() {
        let dir = tempfile::tempdir().unwrap();
        zero_head_checkpoint(dir.path());
        let v = Volume::filled([40, 36, 32], 0.3, [1.0; 3], Modality::Synth).unwrap();
        let r = reconstruct_report(dir.path(), &[("a".into(), v)], 0.0, 0, None).unwrap();
        assert_eq!(r.volumes[0].masked_voxels, 0);
        assert_eq!(r.volumes[0].mse, None);
        assert_eq!(r.mean_mse, None);
    }

    #[test]
    fn perfect_decoder_on_trivial_data_has_zero_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = zero_head_checkpoint(dir.path());
        let v = Volume::filled([32; 3], 0.0, [1.0; 3], Modality::Synth).unwrap();
        let out = dir.path().join("recon");
        let r = reconstruct_report(dir.path(), &[("zero".into(), v)], 0.7, 1, Some(&out)).unwrap();
        let expected = crate::tokenizer::mask_count(cfg.encoder.num_final_tokens(), 0.7)
            * cfg.encoder.effective_patch().pow(3);
        assert_eq!(r.volumes[0].masked_voxels, expected);
        assert_eq!(r.mean_mse, Some(0.0));
        assert!(out.join("report.json").exists());
        assert_eq!(load_volume(out.join("zero_recon")).unwrap().shape(), [32; 3]);
    }

    #[test]
    fn masked_input_zeroes_exactly_the_masked_blocks() {
        let cfg = PretrainConfig::default().encoder;
        let encoder = Encoder::new(&cfg, DType::F32).unwrap();
        let crop = Volume::filled([32; 3], 1.0, [1.0; 3], Modality::Synth).unwrap();
        let mask = sample_mask(cfg.num_final_tokens(), 0.5, 9).unwrap();
        let data = masked_input(&encoder, &crop, &mask).unwrap();
        let zeros = data.iter().filter(|&&x| x == 0.0).count();
        assert_eq!(zeros, mask.count() * cfg.effective_patch().pow(3));
    }

    #[test]
    fn central_crop_is_centred() {
        let data: Vec<f32> = (0..40 * 40 * 40).map(|i| i as f32).collect();
        let v = Volume::new([40; 3], data, [1.0; 3], Modality::Synth).unwrap();
        let c = central_crop(&v, 32).unwrap();
        assert_eq!(c.get(0, 0, 0), v.get(4, 4, 4));
    }
}
