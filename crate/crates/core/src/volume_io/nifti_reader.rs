use std::path::Path;

use nifti::{NiftiObject, NiftiVolume, ReaderOptions, RandomAccessNiftiVolume};

use super::{Modality, Volume};
use crate::error::{Error, Result};

/// Reads a single-file NIfTI-1 volume (`.nii` or `.nii.gz`).
///
/// NIfTI stores `x` fastest; the result is transposed to `(z, y, x)` with
/// `scl_slope`/`scl_inter` applied. NIfTI carries no modality, so volumes
/// whose minimum is below -100 (air in Hounsfield units) are tagged CT and
/// everything else MR.
pub fn load_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| Error::Nifti(format!("{}: {e}", path.display())))?;
    let pixdim = obj.header().pixdim;
    let volume = obj.volume();
    let dim = volume.dim().to_vec();
    if dim.len() < 3 || dim[3..].iter().any(|&d| d != 1) {
        return Err(Error::Shape(format!("expected a 3D NIfTI volume, got dims {dim:?}")));
    }
    let (nx, ny, nz) = (dim[0], dim[1], dim[2]);
    let mut data = Vec::with_capacity(nx as usize * ny as usize * nz as usize);
    let mut coords = vec![0u16; dim.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                coords[..3].copy_from_slice(&[x, y, z]);
                let value = volume
                    .get_f32(&coords)
                    .map_err(|e| Error::Nifti(format!("{}: {e}", path.display())))?;
                data.push(value);
            }
        }
    }
    let spacing = [pixdim[3] as f64, pixdim[2] as f64, pixdim[1] as f64];
    let spacing = spacing.map(|s| if s > 0.0 { s } else { 1.0 });
    let min = data.iter().copied().fold(f32::INFINITY, f32::min);
    let modality = if min < -100.0 { Modality::Ct } else { Modality::Mr };
    Volume::new([nz as usize, ny as usize, nx as usize], data, spacing, modality)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_nifti(dims: [u16; 3], pixdim: [f32; 3], values: &[f32]) -> Vec<u8> {
        let mut h = vec![0u8; 352];
        h[0..4].copy_from_slice(&348i32.to_le_bytes());
        let dim: [i16; 8] = [3, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1];
        for (i, d) in dim.iter().enumerate() {
            h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
        }
        h[70..72].copy_from_slice(&16i16.to_le_bytes());
        h[72..74].copy_from_slice(&32i16.to_le_bytes());
        let pd = [1.0f32, pixdim[0], pixdim[1], pixdim[2], 0.0, 0.0, 0.0, 0.0];
        for (i, p) in pd.iter().enumerate() {
            h[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
        }
        h[108..112].copy_from_slice(&352f32.to_le_bytes());
        h[112..116].copy_from_slice(&1f32.to_le_bytes());
        h[344..348].copy_from_slice(b"n+1\0");
        for v in values {
            h.extend_from_slice(&v.to_le_bytes());
        }
        h
    }

    #[test]
    fn reads_and_transposes_to_zyx() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.nii");
        // x fastest on disk: value = x + 10 y + 100 z
        let (nx, ny, nz) = (3u16, 2u16, 2u16);
        let mut values = Vec::new();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    values.push(x as f32 + 10.0 * y as f32 + 100.0 * z as f32);
                }
            }
        }
        std::fs::write(&path, minimal_nifti([nx, ny, nz], [0.8, 0.9, 2.5], &values)).unwrap();
        let v = super::super::load_volume(&path).unwrap();
        assert_eq!(v.shape(), [2, 2, 3]);
        assert_eq!(v.spacing, [2.5, 0.9_f32 as f64, 0.8_f32 as f64]);
        assert_eq!(v.get(1, 1, 2), 112.0);
        assert_eq!(v.get(0, 1, 0), 10.0);
        assert_eq!(v.modality, Modality::Mr);
    }

    #[test]
    fn missing_nifti_is_io_error() {
        assert!(matches!(load_nifti("/nonexistent/x.nii"), Err(Error::Io { .. })));
    }
}
