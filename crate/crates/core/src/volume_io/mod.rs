//! Volumes, label maps and everything that touches them on disk.
//!
//! Arrays are stored flat in `(z, y, x)` row-major order: the voxel at
//! `(z, y, x)` lives at `(z * H + y) * W + x`.

mod native;
mod nifti_reader;
mod phantom;

pub use native::{load_labels, load_volume, save_labels, save_volume, Sidecar};
pub use nifti_reader::load_nifti;
pub use phantom::{generate_phantom, generate_phantoms, PhantomSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default CT intensity window in Hounsfield units.
pub const CT_WINDOW: (f32, f32) = (-1000.0, 1000.0);

/// Acquisition modality of a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Modality {
    Ct,
    Mr,
    Synth,
}

/// `(depth, height, width)` in voxels.
pub type Shape3 = [usize; 3];

/// Number of voxels in a shape.
pub fn voxel_count(shape: Shape3) -> usize {
    shape[0] * shape[1] * shape[2]
}

/// A 3D scalar field with voxel spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    shape: Shape3,
    data: Vec<f32>,
    /// `(sz, sy, sx)` in mm.
    pub spacing: [f64; 3],
    pub modality: Modality,
}

impl Volume {
    pub fn new(shape: Shape3, data: Vec<f32>, spacing: [f64; 3], modality: Modality) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("volume dimensions must be >= 1, got {shape:?}")));
        }
        if voxel_count(shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {} values, got {}",
                voxel_count(shape),
                data.len()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("spacing must be positive, got {spacing:?}")));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("voxel {i} is {}", data[i])));
        }
        Ok(Self {
            shape,
            data,
            spacing,
            modality,
        })
    }

    pub fn filled(shape: Shape3, value: f32, spacing: [f64; 3], modality: Modality) -> Result<Self> {
        Self::new(shape, vec![value; voxel_count(shape)], spacing, modality)
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    /// Copies the cube `[origin, origin + size)` out of the volume. The region must be in bounds.
    pub fn crop(&self, origin: [usize; 3], size: Shape3) -> Result<Volume> {
        for a in 0..3 {
            if origin[a] + size[a] > self.shape[a] {
                return Err(Error::Shape(format!(
                    "crop {origin:?}+{size:?} exceeds volume {:?}",
                    self.shape
                )));
            }
        }
        let mut out = Vec::with_capacity(voxel_count(size));
        for z in 0..size[0] {
            for y in 0..size[1] {
                let start = self.index(origin[0] + z, origin[1] + y, origin[2]);
                out.extend_from_slice(&self.data[start..start + size[2]]);
            }
        }
        Volume::new(size, out, self.spacing, self.modality)
    }

    /// Symmetric zero padding so that every axis is at least `min` long.
    /// Returns the padded volume and the offset of the original inside it.
    pub fn pad_to_at_least(&self, min: Shape3) -> (Volume, [usize; 3]) {
        let mut new_shape = self.shape;
        let mut offset = [0usize; 3];
        for a in 0..3 {
            if self.shape[a] < min[a] {
                new_shape[a] = min[a];
                offset[a] = (min[a] - self.shape[a]) / 2;
            }
        }
        if new_shape == self.shape {
            return (self.clone(), offset);
        }
        let mut data = vec![0.0f32; voxel_count(new_shape)];
        for z in 0..self.shape[0] {
            for y in 0..self.shape[1] {
                let src = self.index(z, y, 0);
                let dst = ((z + offset[0]) * new_shape[1] + y + offset[1]) * new_shape[2] + offset[2];
                data[dst..dst + self.shape[2]].copy_from_slice(&self.data[src..src + self.shape[2]]);
            }
        }
        (
            Volume {
                shape: new_shape,
                data,
                spacing: self.spacing,
                modality: self.modality,
            },
            offset,
        )
    }
}

/// Per-voxel integer class ids, paired with a [`Volume`] of the same shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    shape: Shape3,
    labels: Vec<u16>,
    num_classes: usize,
}

impl LabelMap {
    pub fn new(shape: Shape3, labels: Vec<u16>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidArgument("num_classes must be positive".into()));
        }
        if shape.contains(&0) || voxel_count(shape) != labels.len() {
            return Err(Error::Shape(format!(
                "label shape {shape:?} does not match {} values",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::LabelRange {
                label: bad as u32,
                num_classes,
            });
        }
        Ok(Self {
            shape,
            labels,
            num_classes,
        })
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn crop(&self, origin: [usize; 3], size: Shape3) -> Result<LabelMap> {
        for a in 0..3 {
            if origin[a] + size[a] > self.shape[a] {
                return Err(Error::Shape(format!(
                    "crop {origin:?}+{size:?} exceeds label map {:?}",
                    self.shape
                )));
            }
        }
        let mut out = Vec::with_capacity(voxel_count(size));
        for z in 0..size[0] {
            for y in 0..size[1] {
                let start = ((origin[0] + z) * self.shape[1] + origin[1] + y) * self.shape[2] + origin[2];
                out.extend_from_slice(&self.labels[start..start + size[2]]);
            }
        }
        LabelMap::new(size, out, self.num_classes)
    }

    /// Background (label 0) padding matching [`Volume::pad_to_at_least`].
    pub fn pad_to_at_least(&self, min: Shape3) -> (LabelMap, [usize; 3]) {
        let mut new_shape = self.shape;
        let mut offset = [0usize; 3];
        for a in 0..3 {
            if self.shape[a] < min[a] {
                new_shape[a] = min[a];
                offset[a] = (min[a] - self.shape[a]) / 2;
            }
        }
        if new_shape == self.shape {
            return (self.clone(), offset);
        }
        let mut labels = vec![0u16; voxel_count(new_shape)];
        for z in 0..self.shape[0] {
            for y in 0..self.shape[1] {
                let src = (z * self.shape[1] + y) * self.shape[2];
                let dst = ((z + offset[0]) * new_shape[1] + y + offset[1]) * new_shape[2] + offset[2];
                labels[dst..dst + self.shape[2]].copy_from_slice(&self.labels[src..src + self.shape[2]]);
            }
        }
        (
            LabelMap {
                shape: new_shape,
                labels,
                num_classes: self.num_classes,
            },
            offset,
        )
    }

    /// Distinct label values present, ascending.
    pub fn present_labels(&self) -> Vec<u16> {
        let mut seen = vec![false; self.num_classes];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (0..self.num_classes as u16).filter(|&c| seen[c as usize]).collect()
    }
}

/// `clip((x - lo) / (hi - lo), 0, 1)` voxelwise.
pub fn normalize_intensity(v: &Volume, window: (f32, f32)) -> Result<Volume> {
    let (lo, hi) = window;
    if !(lo < hi) {
        return Err(Error::InvalidArgument(format!("window lo {lo} must be below hi {hi}")));
    }
    let scale = (hi as f64) - (lo as f64);
    let data = v
        .data
        .iter()
        .map(|&x| (((x as f64) - lo as f64) / scale).clamp(0.0, 1.0) as f32)
        .collect();
    Ok(Volume {
        shape: v.shape,
        data,
        spacing: v.spacing,
        modality: v.modality,
    })
}

/// Linear-interpolated percentile of the voxel values, `q` in `[0, 100]`.
pub fn percentile(v: &Volume, q: f64) -> f32 {
    let mut sorted = v.data.clone();
    sorted.sort_by(f32::total_cmp);
    let pos = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    (sorted[lo] as f64 * (1.0 - frac) + sorted[hi] as f64 * frac) as f32
}

/// Modality-dependent normalization to `[0, 1]`: the fixed CT window for CT,
/// per-volume `(p1, p99)` for everything else. A constant volume maps to zeros.
pub fn normalize_for_modality(v: &Volume) -> Result<Volume> {
    let window = match v.modality {
        Modality::Ct => CT_WINDOW,
        Modality::Mr | Modality::Synth => (percentile(v, 1.0), percentile(v, 99.0)),
    };
    if window.0 < window.1 {
        normalize_intensity(v, window)
    } else {
        Volume::filled(v.shape, 0.0, v.spacing, v.modality)
    }
}

fn resampled_shape(shape: Shape3, spacing: [f64; 3], target: [f64; 3]) -> Result<Shape3> {
    if target.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
        return Err(Error::InvalidArgument(format!("target spacing must be positive, got {target:?}")));
    }
    let mut out = [0usize; 3];
    for a in 0..3 {
        out[a] = (shape[a] as f64 * spacing[a] / target[a]).round() as usize;
    }
    if out.contains(&0) {
        return Err(Error::Shape(format!(
            "resampling {shape:?} from {spacing:?} to {target:?} gives degenerate shape {out:?}"
        )));
    }
    Ok(out)
}

/// Source coordinate of output index `i` with voxel centres aligned.
fn source_coord(i: usize, ratio: f64, n_in: usize) -> (usize, usize, f64) {
    let x = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
    let i0 = x.floor() as usize;
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, x - i0 as f64)
}

/// Trilinear resampling to a new voxel spacing. The output shape is
/// `round(shape * spacing / target)` per axis.
pub fn resample(v: &Volume, target_spacing: [f64; 3]) -> Result<Volume> {
    let new_shape = resampled_shape(v.shape, v.spacing, target_spacing)?;
    if target_spacing == v.spacing {
        return Ok(v.clone());
    }
    let ratios: Vec<f64> = (0..3).map(|a| target_spacing[a] / v.spacing[a]).collect();
    let zs: Vec<_> = (0..new_shape[0]).map(|i| source_coord(i, ratios[0], v.shape[0])).collect();
    let ys: Vec<_> = (0..new_shape[1]).map(|i| source_coord(i, ratios[1], v.shape[1])).collect();
    let xs: Vec<_> = (0..new_shape[2]).map(|i| source_coord(i, ratios[2], v.shape[2])).collect();
    let mut data = Vec::with_capacity(voxel_count(new_shape));
    for &(z0, z1, fz) in &zs {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let mut acc = 0.0f64;
                for (zi, wz) in [(z0, 1.0 - fz), (z1, fz)] {
                    if wz == 0.0 {
                        continue;
                    }
                    for (yi, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                        if wy == 0.0 {
                            continue;
                        }
                        for (xi, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                            if wx == 0.0 {
                                continue;
                            }
                            acc += wz * wy * wx * v.get(zi, yi, xi) as f64;
                        }
                    }
                }
                data.push(acc as f32);
            }
        }
    }
    Volume::new(new_shape, data, target_spacing, v.modality)
}

/// Nearest-neighbour resampling of a label map given its current spacing.
pub fn resample_labels(l: &LabelMap, spacing: [f64; 3], target_spacing: [f64; 3]) -> Result<LabelMap> {
    let new_shape = resampled_shape(l.shape, spacing, target_spacing)?;
    let idx = |a: usize, n: usize| -> Vec<usize> {
        let ratio = target_spacing[a] / spacing[a];
        (0..n)
            .map(|i| (((i as f64 + 0.5) * ratio - 0.5).round().max(0.0) as usize).min(l.shape[a] - 1))
            .collect()
    };
    let (zs, ys, xs) = (idx(0, new_shape[0]), idx(1, new_shape[1]), idx(2, new_shape[2]));
    let mut labels = Vec::with_capacity(voxel_count(new_shape));
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                labels.push(l.labels[(z * l.shape[1] + y) * l.shape[2] + x]);
            }
        }
    }
    LabelMap::new(new_shape, labels, l.num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: Shape3) -> Volume {
        let data = (0..voxel_count(shape)).map(|i| i as f32 * 0.25 - 3.0).collect();
        Volume::new(shape, data, [1.0, 1.0, 1.0], Modality::Synth).unwrap()
    }

    #[test]
    fn normalize_endpoints_and_midpoint() {
        let v = Volume::new([1, 1, 3], vec![-10.0, 10.0, 0.0], [1.0; 3], Modality::Mr).unwrap();
        let n = normalize_intensity(&v, (-10.0, 10.0)).unwrap();
        assert_eq!(n.data(), &[0.0, 1.0, 0.5]);
        let c = Volume::filled([2, 2, 2], 0.0, [1.0; 3], Modality::Mr).unwrap();
        let n = normalize_intensity(&c, (-10.0, 10.0)).unwrap();
        assert!(n.data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn normalize_ct_window() {
        let v = Volume::new([1, 1, 3], vec![-1000.0, 40.0, 3000.0], [1.0; 3], Modality::Ct).unwrap();
        let n = normalize_intensity(&v, CT_WINDOW).unwrap();
        assert_eq!(n.data()[0], 0.0);
        assert!((n.data()[1] - 0.52).abs() < 1e-7);
        assert_eq!(n.data()[2], 1.0);
        assert_eq!(normalize_for_modality(&v).unwrap(), n);
    }

    #[test]
    fn normalize_rejects_inverted_window() {
        let v = ramp([2, 2, 2]);
        assert!(normalize_intensity(&v, (1.0, 1.0)).is_err());
        assert!(normalize_intensity(&v, (2.0, 1.0)).is_err());
    }

    #[test]
    fn volume_rejects_bad_inputs() {
        assert!(Volume::new([2, 2, 2], vec![0.0; 7], [1.0; 3], Modality::Ct).is_err());
        assert!(Volume::new([0, 2, 2], vec![], [1.0; 3], Modality::Ct).is_err());
        assert!(Volume::new([1, 1, 1], vec![f32::NAN], [1.0; 3], Modality::Ct).is_err());
        assert!(Volume::new([1, 1, 1], vec![0.0], [1.0, 0.0, 1.0], Modality::Ct).is_err());
    }

    #[test]
    fn resample_identity_is_exact() {
        let v = ramp([3, 4, 5]);
        assert_eq!(resample(&v, [1.0, 1.0, 1.0]).unwrap(), v);
    }

    #[test]
    fn resample_halves_shape() {
        let v = ramp([10, 10, 10]);
        let r = resample(&v, [2.0, 2.0, 2.0]).unwrap();
        assert_eq!(r.shape(), [5, 5, 5]);
        assert_eq!(r.spacing, [2.0, 2.0, 2.0]);
    }

    #[test]
    fn resample_constant_stays_constant() {
        let v = Volume::filled([7, 5, 6], 0.3, [1.0, 1.5, 0.8], Modality::Ct).unwrap();
        for target in [[2.0, 2.0, 2.0], [0.7, 1.1, 0.5], [1.5, 1.5, 2.0]] {
            let r = resample(&v, target).unwrap();
            assert!(r.data().iter().all(|&x| (x - 0.3).abs() < 1e-6), "{target:?}");
        }
    }

    #[test]
    fn resample_linear_field_is_reproduced_in_the_interior() {
        // a field linear in x is reproduced exactly by trilinear interpolation
        let shape = [4, 4, 16];
        let data = (0..voxel_count(shape)).map(|i| (i % 16) as f32).collect();
        let v = Volume::new(shape, data, [1.0; 3], Modality::Synth).unwrap();
        let r = resample(&v, [1.0, 1.0, 0.5]).unwrap();
        assert_eq!(r.shape(), [4, 4, 32]);
        // output x index i maps to source (i + 0.5) / 2 - 0.5
        for i in 1..31 {
            let expect = ((i as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 15.0);
            assert!((r.get(0, 0, i) as f64 - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn resample_rejects_degenerate() {
        let v = ramp([1, 2, 2]);
        assert!(resample(&v, [10.0, 1.0, 1.0]).is_err());
        assert!(resample(&v, [0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn crop_and_pad() {
        let v = ramp([4, 4, 4]);
        let c = v.crop([1, 2, 0], [2, 2, 4]).unwrap();
        assert_eq!(c.get(0, 0, 0), v.get(1, 2, 0));
        assert_eq!(c.get(1, 1, 3), v.get(2, 3, 3));
        assert!(v.crop([3, 0, 0], [2, 1, 1]).is_err());
        let (p, off) = v.pad_to_at_least([6, 4, 5]);
        assert_eq!(p.shape(), [6, 4, 5]);
        assert_eq!(off, [1, 0, 0]);
        assert_eq!(p.get(1, 0, 0), v.get(0, 0, 0));
        assert_eq!(p.get(0, 0, 0), 0.0);
    }

    #[test]
    fn label_map_validates_range() {
        assert!(matches!(
            LabelMap::new([1, 1, 2], vec![0, 3], 3),
            Err(Error::LabelRange { label: 3, num_classes: 3 })
        ));
        let l = LabelMap::new([1, 1, 3], vec![0, 2, 2], 4).unwrap();
        assert_eq!(l.present_labels(), vec![0, 2]);
    }

    #[test]
    fn percentile_window() {
        let v = Volume::new([1, 1, 101], (0..101).map(|i| i as f32).collect(), [1.0; 3], Modality::Mr).unwrap();
        assert_eq!(percentile(&v, 1.0), 1.0);
        assert_eq!(percentile(&v, 99.0), 99.0);
        let n = normalize_for_modality(&v).unwrap();
        assert_eq!(n.data()[0], 0.0);
        assert_eq!(n.data()[100], 1.0);
    }
}
