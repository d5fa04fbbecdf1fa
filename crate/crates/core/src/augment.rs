//! Random cubic crops and optional per-view flips / intensity jitter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume_io::Volume;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Edge length `S` of the cubic views.
    pub view_size: usize,
    /// `S` must be a multiple of this (patch size times mask-grid downsampling).
    pub granularity: usize,
    /// Probability of flipping each axis, per view. 0 disables.
    pub flip_prob: f64,
    /// Half-width of the uniform additive intensity jitter. 0 disables.
    pub jitter: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            view_size: 96,
            granularity: 16,
            flip_prob: 0.0,
            jitter: 0.0,
        }
    }
}

/// One augmented cubic crop.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub data: Volume,
    /// Crop offset `(z, y, x)` in the (possibly padded) source volume.
    pub origin: [usize; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub u: View,
    pub v: View,
    pub rng_seed: u64,
    /// Symmetric zero padding applied to the source before cropping, per axis.
    pub padding: [usize; 3],
}

fn check_geometry(cfg: &AugmentConfig) -> Result<()> {
    if cfg.view_size == 0 || cfg.granularity == 0 || !cfg.view_size.is_multiple_of(cfg.granularity) {
        return Err(Error::Geometry(format!(
            "view size {} is not a multiple of the tokenizer granularity {}",
            cfg.view_size, cfg.granularity
        )));
    }
    Ok(())
}

fn flip_axis(v: &mut Volume, axis: usize) -> Result<()> {
    let [d, h, w] = v.shape();
    let src = v.data().to_vec();
    let mut out = vec![0.0f32; src.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let (sz, sy, sx) = match axis {
                    0 => (d - 1 - z, y, x),
                    1 => (z, h - 1 - y, x),
                    _ => (z, y, w - 1 - x),
                };
                out[(z * h + y) * w + x] = src[(sz * h + sy) * w + sx];
            }
        }
    }
    *v = Volume::new(v.shape(), out, v.spacing, v.modality)?;
    Ok(())
}

fn one_view(src: &Volume, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<View> {
    let s = cfg.view_size;
    let shape = src.shape();
    let origin = [0, 1, 2].map(|a| rng.random_range(0..=shape[a] - s));
    let mut data = src.crop(origin, [s, s, s])?;
    if cfg.flip_prob > 0.0 {
        for axis in 0..3 {
            if rng.random_bool(cfg.flip_prob.min(1.0)) {
                flip_axis(&mut data, axis)?;
            }
        }
    }
    if cfg.jitter > 0.0 {
        let shift = rng.random_range(-cfg.jitter..=cfg.jitter);
        let jittered = data.data().iter().map(|&x| (x + shift).clamp(0.0, 1.0)).collect();
        data = Volume::new(data.shape(), jittered, data.spacing, data.modality)?;
    }
    Ok(View { data, origin })
}

/// Samples two independent views of `volume`. Deterministic in `rng_seed`.
/// Volumes smaller than the view are zero-padded symmetrically first.
pub fn sample_two_views(volume: &Volume, cfg: &AugmentConfig, rng_seed: u64) -> Result<ViewPair> {
    check_geometry(cfg)?;
    let s = cfg.view_size;
    let (src, padding) = volume.pad_to_at_least([s, s, s]);
    let padding = [0, 1, 2].map(|a| if src.shape()[a] != volume.shape()[a] { padding[a] } else { 0 });
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let u = one_view(&src, cfg, &mut rng)?;
    let v = one_view(&src, cfg, &mut rng)?;
    Ok(ViewPair {
        u,
        v,
        rng_seed,
        padding,
    })
}
