//! Synthetic multi-organ phantoms.
//!
//! Each "organ" is an axis-aligned ellipsoid. Class `k` has a characteristic
//! brightness and size: low class ids are large and dim, high ids small and
//! bright. Per-phantom jitter on both keeps instances varied while the
//! intensity gap between any two blobs stays at least `2 * noise_std`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{voxel_count, LabelMap, Modality, Shape3, Volume};
use crate::error::{Error, Result};

/// Intensity of label-0 tissue before noise and bias.
pub const BACKGROUND_LEVEL: f32 = 0.1;
const LOWEST_ORGAN: f64 = 0.3;
const HIGHEST_ORGAN: f64 = 0.9;
const MAX_PLACEMENT_TRIES: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub size: Shape3,
    pub num_blobs: usize,
    pub seed: u64,
    pub noise_std: f32,
    pub bias_field: bool,
}

impl PhantomSpec {
    pub fn num_classes(&self) -> usize {
        self.num_blobs + 1
    }

    /// Base intensity of each organ class, index 0 = label 1.
    fn class_means(&self) -> Vec<f64> {
        let n = self.num_blobs;
        if n == 1 {
            return vec![(LOWEST_ORGAN + HIGHEST_ORGAN) / 2.0];
        }
        (0..n)
            .map(|k| LOWEST_ORGAN + (HIGHEST_ORGAN - LOWEST_ORGAN) * k as f64 / (n - 1) as f64)
            .collect()
    }

    fn validate(&self) -> Result<f64> {
        if self.num_blobs == 0 {
            return Err(Error::InvalidArgument("num_blobs must be >= 1".into()));
        }
        if self.size.iter().any(|&d| d < 8) {
            return Err(Error::InvalidArgument(format!("phantom size {:?} below 8 voxels", self.size)));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::InvalidArgument(format!("noise_std {} must be >= 0", self.noise_std)));
        }
        let gap = if self.num_blobs == 1 {
            f64::INFINITY
        } else {
            (HIGHEST_ORGAN - LOWEST_ORGAN) / (self.num_blobs - 1) as f64
        };
        let gap = gap.min(LOWEST_ORGAN - BACKGROUND_LEVEL as f64);
        let needed = 2.0 * self.noise_std as f64;
        if gap < needed {
            return Err(Error::InvalidArgument(format!(
                "{} blobs leave an intensity gap of {gap:.3}, below 2 * noise_std = {needed:.3}",
                self.num_blobs
            )));
        }
        // each mean may move by at most half the slack
        Ok(((gap - needed) / 2.0).min(0.03))
    }
}

struct Blob {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Blob {
    fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        let p = [z as f64, y as f64, x as f64];
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    fn bounds(&self, shape: Shape3) -> [(usize, usize); 3] {
        let mut b = [(0, 0); 3];
        for a in 0..3 {
            let lo = (self.center[a] - self.radii[a]).floor().max(0.0) as usize;
            let hi = ((self.center[a] + self.radii[a]).ceil() as usize).min(shape[a] - 1);
            b[a] = (lo, hi);
        }
        b
    }
}

/// Generates a phantom volume and its label map. Pure function of `spec`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelMap)> {
    let jitter = spec.validate()?;
    let shape = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.num_blobs;
    let min_dim = *shape.iter().min().unwrap() as f64;
    let means = spec.class_means();

    let mut labels = vec![0u16; voxel_count(shape)];
    let mut level = vec![BACKGROUND_LEVEL; voxel_count(shape)];
    let idx = |z: usize, y: usize, x: usize| (z * shape[1] + y) * shape[2] + x;

    for k in 0..n {
        let frac = if n == 1 { 0.0 } else { k as f64 / (n - 1) as f64 };
        let base_radius = min_dim * (0.2 - 0.1 * frac);
        let mean = means[k] + rng.random_range(-jitter..=jitter);
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let radii = [0usize, 1, 2].map(|_| (base_radius * rng.random_range(0.8..1.2)).max(1.5));
            let mut center = [0.0; 3];
            let mut fits = true;
            for a in 0..3 {
                let lo = radii[a] + 1.0;
                let hi = shape[a] as f64 - 2.0 - radii[a];
                if hi <= lo {
                    fits = false;
                    break;
                }
                center[a] = rng.random_range(lo..hi);
            }
            if !fits {
                continue;
            }
            let blob = Blob { center, radii };
            let [(z0, z1), (y0, y1), (x0, x1)] = blob.bounds(shape);
            // reject if the blob or a one-voxel shell around it touches another organ
            let grown = Blob {
                center,
                radii: radii.map(|r| r + 1.0),
            };
            let [(gz0, gz1), (gy0, gy1), (gx0, gx1)] = grown.bounds(shape);
            let overlaps = (gz0..=gz1).any(|z| {
                (gy0..=gy1).any(|y| (gx0..=gx1).any(|x| labels[idx(z, y, x)] != 0 && grown.contains(z, y, x)))
            });
            if overlaps {
                continue;
            }
            for z in z0..=z1 {
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        if blob.contains(z, y, x) {
                            labels[idx(z, y, x)] = (k + 1) as u16;
                            level[idx(z, y, x)] = mean as f32;
                        }
                    }
                }
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Placement(format!(
                "could not place blob {} of {n} in {shape:?} after {MAX_PLACEMENT_TRIES} tries",
                k + 1
            )));
        }
    }

    if spec.bias_field {
        // 1 + low-order polynomial in normalized coordinates, amplitude <= 0.2
        let coef: Vec<f64> = (0..6).map(|_| rng.random_range(-0.04..0.04)).collect();
        let norm = |i: usize, a: usize| 2.0 * i as f64 / (shape[a] - 1) as f64 - 1.0;
        for z in 0..shape[0] {
            let zn = norm(z, 0);
            for y in 0..shape[1] {
                let yn = norm(y, 1);
                for x in 0..shape[2] {
                    let xn = norm(x, 2);
                    let field = 1.0
                        + coef[0] * zn
                        + coef[1] * yn
                        + coef[2] * xn
                        + coef[3] * zn * yn
                        + coef[4] * yn * xn
                        + coef[5] * (xn * xn - 0.5);
                    let i = idx(z, y, x);
                    level[i] = (level[i] as f64 * field) as f32;
                }
            }
        }
    }

    if spec.noise_std > 0.0 {
        let normal = Normal::new(0.0f32, spec.noise_std)
            .map_err(|e| Error::InvalidArgument(format!("noise_std: {e}")))?;
        for v in level.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }

    let volume = Volume::new(shape, level, [2.0, 1.5, 1.5], Modality::Synth)?;
    let labels = LabelMap::new(shape, labels, spec.num_classes())?;
    Ok((volume, labels))
}

/// Generates many phantoms on worker threads; the output equals sequential generation.
pub fn generate_phantoms(specs: &[PhantomSpec]) -> Result<Vec<(Volume, LabelMap)>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(specs.len().max(1));
    if workers <= 1 {
        return specs.iter().map(generate_phantom).collect();
    }
    let chunk = specs.len().div_ceil(workers);
    let results: Vec<Result<Vec<_>>> = std::thread::scope(|s| {
        let handles: Vec<_> = specs
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(generate_phantom).collect::<Result<Vec<_>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("phantom worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(specs.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> PhantomSpec {
        PhantomSpec {
            size: [40, 40, 40],
            num_blobs: 3,
            seed,
            noise_std: 0.04,
            bias_field: true,
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let (a, la) = generate_phantom(&spec(7)).unwrap();
        let (b, lb) = generate_phantom(&spec(7)).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let (c, _) = generate_phantom(&spec(8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn labels_are_exactly_zero_to_num_blobs() {
        for seed in 0..5 {
            let (_, l) = generate_phantom(&spec(seed)).unwrap();
            assert_eq!(l.present_labels(), vec![0, 1, 2, 3]);
            assert_eq!(l.num_classes(), 4);
        }
    }

    #[test]
    fn noiseless_blobs_are_flat_and_separated() {
        let s = PhantomSpec {
            noise_std: 0.0,
            bias_field: false,
            ..spec(3)
        };
        let (v, l) = generate_phantom(&s).unwrap();
        let mut level: Vec<Option<f32>> = vec![None; l.num_classes()];
        for (&x, &c) in v.data().iter().zip(l.labels()) {
            match level[c as usize] {
                None => level[c as usize] = Some(x),
                Some(m) => assert_eq!(m, x, "class {c} not flat"),
            }
        }
        assert_eq!(level[0], Some(BACKGROUND_LEVEL));
        let means: Vec<f32> = level.iter().map(|m| m.unwrap()).collect();
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                assert!((means[i] - means[j]).abs() > 0.1);
            }
        }
    }

    #[test]
    fn separation_exceeds_twice_noise() {
        let s = spec(11);
        let (v, l) = generate_phantom(&PhantomSpec {
            noise_std: 0.0,
            bias_field: false,
            ..s.clone()
        })
        .unwrap();
        let mut means = vec![0.0f32; l.num_classes()];
        for (&x, &c) in v.data().iter().zip(l.labels()) {
            means[c as usize] = x;
        }
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                assert!((means[i] - means[j]).abs() >= 2.0 * s.noise_std);
            }
        }
    }

    #[test]
    fn too_much_noise_is_rejected() {
        let s = PhantomSpec {
            noise_std: 0.2,
            ..spec(0)
        };
        assert!(matches!(generate_phantom(&s), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn impossible_placement_errors() {
        let s = PhantomSpec {
            size: [8, 8, 8],
            num_blobs: 12,
            noise_std: 0.0,
            ..spec(0)
        };
        assert!(matches!(generate_phantom(&s), Err(Error::Placement(_))));
    }

    #[test]
    fn batch_matches_sequential() {
        let specs: Vec<_> = (0..6).map(spec).collect();
        let batch = generate_phantoms(&specs).unwrap();
        for (s, got) in specs.iter().zip(&batch) {
            assert_eq!(&generate_phantom(s).unwrap(), got);
        }
    }
}
