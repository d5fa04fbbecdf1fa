//! Sliding-window inference with uniform logit averaging.

use candle_core::{DType, Tensor};

use crate::distiller::stack_views;
use crate::error::{Error, Result};
use crate::volume_io::{voxel_count, LabelMap, Shape3, Volume};

/// Anything that maps cubic views to per-voxel class logits.
pub trait VoxelClassifier {
    /// Edge of the cubic input the model accepts.
    fn window(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn dtype(&self) -> DType;
    /// `(B, S³)` raster voxels → `(B, S³, C)` logits.
    fn logits(&self, views: &Tensor) -> Result<Tensor>;
}

/// Windows evaluated per forward call.
const WINDOW_BATCH: usize = 2;

/// Window origins along one axis: multiples of `window·(1−overlap)`, with the
/// last origin clipped to `len − window`.
pub fn window_origins(len: usize, window: usize, overlap: f64) -> Result<Vec<usize>> {
    if window == 0 {
        return Err(Error::InvalidArgument("window must be positive".into()));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::InvalidArgument(format!("overlap {overlap} outside [0, 1)")));
    }
    if window > len {
        return Err(Error::Geometry(format!("window {window} larger than axis {len}")));
    }
    let stride = ((window as f64 * (1.0 - overlap) + 1e-9).floor() as usize).max(1);
    let mut origins = vec![0];
    while origins.last().unwrap() + window < len {
        let next = origins.last().unwrap() + stride;
        origins.push(next.min(len - window));
    }
    Ok(origins)
}

/// Averaged logits over a volume, voxel-major `(z, y, x, class)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedLogits {
    pub shape: Shape3,
    pub num_classes: usize,
    pub data: Vec<f64>,
}

impl FusedLogits {
    /// Per-voxel argmax; ties go to the lowest class id.
    pub fn argmax(&self) -> Result<LabelMap> {
        let c = self.num_classes;
        let labels = self
            .data
            .chunks_exact(c)
            .map(|row| {
                let mut best = 0;
                for k in 1..c {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                best as u16
            })
            .collect();
        LabelMap::new(self.shape, labels, c)
    }
}

/// Compensated accumulator per logit.
struct KahanGrid {
    sum: Vec<f64>,
    comp: Vec<f64>,
    count: Vec<u32>,
}

impl KahanGrid {
    fn new(voxels: usize, c: usize) -> Self {
        Self {
            sum: vec![0.0; voxels * c],
            comp: vec![0.0; voxels * c],
            count: vec![0; voxels],
        }
    }

    fn add(&mut self, i: usize, x: f64) {
        let y = x - self.comp[i];
        let t = self.sum[i] + y;
        self.comp[i] = (t - self.sum[i]) - y;
        self.sum[i] = t;
    }
}

/// Fuses logits over the given window origins. Origins are sorted first, so
/// the result does not depend on the order they are listed in.
pub fn fuse_at_origins(model: &impl VoxelClassifier, volume: &Volume, origins: &[[usize; 3]]) -> Result<FusedLogits> {
    let w = model.window();
    let c = model.num_classes();
    let shape = volume.shape();
    let mut origins = origins.to_vec();
    origins.sort_unstable();
    origins.dedup();
    let mut acc = KahanGrid::new(voxel_count(shape), c);
    for chunk in origins.chunks(WINDOW_BATCH) {
        let crops = chunk
            .iter()
            .map(|&o| volume.crop(o, [w, w, w]))
            .collect::<Result<Vec<_>>>()?;
        let views = stack_views(&crops.iter().collect::<Vec<_>>(), model.dtype())?;
        let logits = model.logits(&views)?;
        let expected = [chunk.len(), w.pow(3), c];
        if logits.dims() != expected {
            return Err(Error::Shape(format!("model returned {:?}, expected {expected:?}", logits.dims())));
        }
        let values = logits.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        for (b, o) in chunk.iter().enumerate() {
            let block = &values[b * w.pow(3) * c..(b + 1) * w.pow(3) * c];
            for z in 0..w {
                for y in 0..w {
                    for x in 0..w {
                        let v = ((o[0] + z) * shape[1] + o[1] + y) * shape[2] + o[2] + x;
                        let local = ((z * w + y) * w + x) * c;
                        acc.count[v] += 1;
                        for k in 0..c {
                            acc.add(v * c + k, block[local + k]);
                        }
                    }
                }
            }
        }
    }
    if let Some(v) = acc.count.iter().position(|&n| n == 0) {
        return Err(Error::Geometry(format!("voxel {v} not covered by any window")));
    }
    let mut data = acc.sum;
    for (v, &n) in acc.count.iter().enumerate() {
        for k in 0..c {
            data[v * c + k] /= n as f64;
        }
    }
    Ok(FusedLogits {
        shape,
        num_classes: c,
        data,
    })
}

/// Pads `volume` to at least the model window, tiles it, averages the
/// overlapping logits and crops back to the original extent.
pub fn fuse_logits(model: &impl VoxelClassifier, volume: &Volume, overlap: f64) -> Result<FusedLogits> {
    let w = model.window();
    let (padded, offset) = volume.pad_to_at_least([w, w, w]);
    let ps = padded.shape();
    let axes = [0, 1, 2].map(|a| window_origins(ps[a], w, overlap));
    let [oz, oy, ox] = axes;
    let (oz, oy, ox) = (oz?, oy?, ox?);
    let mut origins = Vec::with_capacity(oz.len() * oy.len() * ox.len());
    for &z in &oz {
        for &y in &oy {
            for &x in &ox {
                origins.push([z, y, x]);
            }
        }
    }
    let fused = fuse_at_origins(model, &padded, &origins)?;
    let shape = volume.shape();
    if shape == ps {
        return Ok(fused);
    }
    let c = fused.num_classes;
    let mut data = Vec::with_capacity(voxel_count(shape) * c);
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            let start = ((z + offset[0]) * ps[1] + y + offset[1]) * ps[2] + offset[2];
            data.extend_from_slice(&fused.data[start * c..(start + shape[2]) * c]);
        }
    }
    Ok(FusedLogits {
        shape,
        num_classes: c,
        data,
    })
}

pub fn sliding_window_infer(model: &impl VoxelClassifier, volume: &Volume, overlap: f64) -> Result<LabelMap> {
    fuse_logits(model, volume, overlap)?.argmax()
}

/// Argmax of a single forward pass on a window-sized volume.
pub fn direct_infer(model: &impl VoxelClassifier, volume: &Volume) -> Result<LabelMap> {
    let w = model.window();
    if volume.shape() != [w, w, w] {
        return Err(Error::Geometry(format!("direct inference needs a {w}³ volume, got {:?}", volume.shape())));
    }
    let logits = model.logits(&stack_views(&[volume], model.dtype())?)?;
    let data = logits.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    FusedLogits {
        shape: volume.shape(),
        num_classes: model.num_classes(),
        data,
    }
    .argmax()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_io::Modality;
    use candle_core::Device;

    /// Logits are fixed functions of the voxel value, or a constant.
    struct Toy {
        window: usize,
        constant: Option<Vec<f32>>,
    }

    impl VoxelClassifier for Toy {
        fn window(&self) -> usize {
            self.window
        }
        fn num_classes(&self) -> usize {
            3
        }
        fn dtype(&self) -> DType {
            DType::F32
        }
        fn logits(&self, views: &Tensor) -> Result<Tensor> {
            let (b, n) = views.dims2()?;
            match &self.constant {
                Some(c) => Ok(Tensor::from_vec(c.clone(), (1, 1, 3), &Device::Cpu)?.broadcast_as((b, n, 3))?.contiguous()?),
                None => {
                    let x = views.unsqueeze(2)?;
                    Ok(Tensor::cat(&[&x.affine(-1.0, 0.5)?, &x, &x.sqr()?], 2)?)
                }
            }
        }
    }

    fn ramp(shape: Shape3) -> Volume {
        let n = voxel_count(shape);
        let data = (0..n).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        Volume::new(shape, data, [1.0; 3], Modality::Ct).unwrap()
    }

    #[test]
    fn origins_for_half_overlap() {
        assert_eq!(window_origins(128, 96, 0.5).unwrap(), vec![0, 32]);
        assert_eq!(window_origins(96, 96, 0.5).unwrap(), vec![0]);
        assert_eq!(window_origins(100, 32, 0.5).unwrap(), vec![0, 16, 32, 48, 64, 68]);
        assert_eq!(window_origins(40, 32, 0.0).unwrap(), vec![0, 8]);
        assert!(window_origins(16, 32, 0.5).is_err());
        assert!(window_origins(64, 32, 1.0).is_err());
    }

    #[test]
    fn one_window_matches_direct_inference() {
        let model = Toy {
            window: 8,
            constant: None,
        };
        let v = ramp([8, 8, 8]);
        assert_eq!(sliding_window_infer(&model, &v, 0.5).unwrap(), direct_infer(&model, &v).unwrap());
    }

    #[test]
    fn pointwise_model_is_unchanged_by_tiling() {
        let model = Toy {
            window: 8,
            constant: None,
        };
        let v = ramp([13, 10, 9]);
        let fused = fuse_logits(&model, &v, 0.5).unwrap();
        // every window sees the same value at a voxel, so the average equals it
        for (i, &x) in v.data().iter().enumerate() {
            let x = x as f64;
            assert!((fused.data[i * 3 + 1] - x).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_model_gives_constant_labels() {
        let model = Toy {
            window: 8,
            constant: Some(vec![0.1, 0.7, 0.7]),
        };
        let labels = sliding_window_infer(&model, &ramp([20, 11, 8]), 0.5).unwrap();
        // tie between 1 and 2 resolves to the lower id
        assert!(labels.labels().iter().all(|&l| l == 1));
    }

    #[test]
    fn small_volumes_are_padded_and_cropped_back() {
        let model = Toy {
            window: 8,
            constant: None,
        };
        let fused = fuse_logits(&model, &ramp([5, 8, 6]), 0.5).unwrap();
        assert_eq!(fused.shape, [5, 8, 6]);
        assert_eq!(fused.data.len(), 5 * 8 * 6 * 3);
    }

    #[test]
    fn fusion_ignores_origin_order() {
        let model = Toy {
            window: 8,
            constant: None,
        };
        let v = ramp([12, 12, 12]);
        let mut origins = Vec::new();
        for z in [0, 4] {
            for y in [0, 2, 4] {
                for x in [0, 4] {
                    origins.push([z, y, x]);
                }
            }
        }
        let a = fuse_at_origins(&model, &v, &origins).unwrap();
        origins.reverse();
        origins.swap(1, 5);
        let b = fuse_at_origins(&model, &v, &origins).unwrap();
        assert_eq!(a, b);
    }
}
