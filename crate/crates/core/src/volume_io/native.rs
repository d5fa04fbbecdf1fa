//! Native interchange format: raw little-endian arrays plus a JSON sidecar.
//!
//! `<name>.f32` holds `f32` intensities, `<name>.labels.u16` holds `u16` class
//! ids, both `(z, y, x)` row-major. `<name>.json` carries the metadata.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{voxel_count, LabelMap, Modality, Shape3, Volume};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub shape: Shape3,
    pub spacing: [f64; 3],
    pub modality: Modality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
}

/// Strips any of the recognised extensions to get the `<name>` stem path.
pub(crate) fn base_path(path: &Path) -> PathBuf {
    let s = path.to_string_lossy();
    for ext in [".labels.u16", ".f32", ".json"] {
        if let Some(stem) = s.strip_suffix(ext) {
            return PathBuf::from(stem);
        }
    }
    path.to_path_buf()
}

fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn read_sidecar(base: &Path) -> Result<Sidecar> {
    let path = with_suffix(base, ".json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Sidecar { path, source })
}

fn write_sidecar(base: &Path, sidecar: &Sidecar) -> Result<()> {
    let path = with_suffix(base, ".json");
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(sidecar)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn is_nifti(path: &Path) -> bool {
    let s = path.to_string_lossy();
    s.ends_with(".nii") || s.ends_with(".nii.gz")
}

/// Loads a volume from the native format (any of `<name>`, `<name>.f32`,
/// `<name>.json`) or from a NIfTI file.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    if is_nifti(path) {
        return super::load_nifti(path);
    }
    let base = base_path(path);
    let sidecar = read_sidecar(&base)?;
    let data_path = with_suffix(&base, ".f32");
    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Shape(format!(
            "{} has {} bytes, not a whole number of f32 values",
            data_path.display(),
            bytes.len()
        )));
    }
    let expected = voxel_count(sidecar.shape);
    if bytes.len() / 4 != expected {
        return Err(Error::Shape(format!(
            "header declares shape {:?} ({} values) but {} holds {}",
            sidecar.shape,
            expected,
            data_path.display(),
            bytes.len() / 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(sidecar.shape, data, sidecar.spacing, sidecar.modality)
}

/// Writes `<base>.f32` and `<base>.json`. An existing sidecar's `num_classes`
/// is kept when the shape matches so that a volume and its labels can share a name.
pub fn save_volume(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    let base = base_path(path.as_ref());
    let num_classes = read_sidecar(&base)
        .ok()
        .filter(|s| s.shape == v.shape())
        .and_then(|s| s.num_classes);
    write_sidecar(
        &base,
        &Sidecar {
            shape: v.shape(),
            spacing: v.spacing,
            modality: v.modality,
            num_classes,
        },
    )?;
    let mut bytes = Vec::with_capacity(v.data().len() * 4);
    for x in v.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    let data_path = with_suffix(&base, ".f32");
    fs::write(&data_path, bytes).map_err(|e| Error::io(&data_path, e))
}

/// Loads `<base>.labels.u16` with its sidecar.
pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let base = base_path(path.as_ref());
    let sidecar = read_sidecar(&base)?;
    let num_classes = sidecar.num_classes.ok_or_else(|| {
        Error::Shape(format!("sidecar for {} lacks num_classes", base.display()))
    })?;
    let data_path = with_suffix(&base, ".labels.u16");
    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let expected = voxel_count(sidecar.shape);
    if bytes.len() != expected * 2 {
        return Err(Error::Shape(format!(
            "header declares shape {:?} ({} labels) but {} holds {} bytes",
            sidecar.shape,
            expected,
            data_path.display(),
            bytes.len()
        )));
    }
    let labels = bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    LabelMap::new(sidecar.shape, labels, num_classes)
}

/// Writes `<base>.labels.u16` and a sidecar carrying `num_classes`.
pub fn save_labels(path: impl AsRef<Path>, l: &LabelMap, spacing: [f64; 3], modality: Modality) -> Result<()> {
    let base = base_path(path.as_ref());
    write_sidecar(
        &base,
        &Sidecar {
            shape: l.shape(),
            spacing,
            modality,
            num_classes: Some(l.num_classes()),
        },
    )?;
    let mut bytes = Vec::with_capacity(l.labels().len() * 2);
    for x in l.labels() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    let data_path = with_suffix(&base, ".labels.u16");
    fs::write(&data_path, bytes).map_err(|e| Error::io(&data_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zeros_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::filled([4, 4, 4], 0.0, [1.0; 3], Modality::Ct).unwrap();
        save_volume(dir.path().join("zeros"), &v).unwrap();
        let back = load_volume(dir.path().join("zeros.f32")).unwrap();
        assert_eq!(back.shape(), [4, 4, 4]);
        assert!(back.data().iter().all(|&x| x == 0.0));
        let sidecar: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("zeros.json")).unwrap()).unwrap();
        assert_eq!(sidecar["modality"], "CT");
        assert_eq!(sidecar["shape"], serde_json::json!([4, 4, 4]));
    }

    #[test]
    fn truncated_data_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("short");
        write_sidecar(
            &base,
            &Sidecar {
                shape: [8, 8, 8],
                spacing: [1.0; 3],
                modality: Modality::Mr,
                num_classes: None,
            },
        )
        .unwrap();
        fs::write(with_suffix(&base, ".f32"), vec![0u8; 500 * 4]).unwrap();
        let err = load_volume(&base).unwrap_err();
        assert!(matches!(err, Error::Shape(_)), "{err}");
    }

    #[test]
    fn non_finite_data_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("nan");
        write_sidecar(
            &base,
            &Sidecar {
                shape: [1, 1, 2],
                spacing: [1.0; 3],
                modality: Modality::Mr,
                num_classes: None,
            },
        )
        .unwrap();
        let mut bytes = 1.0f32.to_le_bytes().to_vec();
        bytes.extend_from_slice(&f32::INFINITY.to_le_bytes());
        fs::write(with_suffix(&base, ".f32"), bytes).unwrap();
        assert!(matches!(load_volume(&base), Err(Error::NonFinite(_))));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_volume(dir.path().join("nope")), Err(Error::Io { .. })));
    }

    #[test]
    fn labels_share_a_sidecar_with_their_volume() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("case");
        let l = LabelMap::new([1, 2, 2], vec![0, 1, 2, 1], 3).unwrap();
        save_labels(&base, &l, [1.5, 1.5, 2.0], Modality::Synth).unwrap();
        let v = Volume::filled([1, 2, 2], 0.25, [1.5, 1.5, 2.0], Modality::Synth).unwrap();
        save_volume(&base, &v).unwrap();
        assert_eq!(load_labels(&base).unwrap(), l);
        assert_eq!(load_volume(&base).unwrap(), v);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn save_load_is_bit_exact(
            shape in (1usize..5, 1usize..5, 1usize..5),
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let shape = [shape.0, shape.1, shape.2];
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..voxel_count(shape))
                .map(|_| f32::from_bits(rng.random::<u32>() & 0xbf7f_ffff))
                .collect();
            let v = Volume::new(shape, data, [0.7, 1.3, 2.0], Modality::Mr).unwrap();
            let dir = tempfile::tempdir().unwrap();
            save_volume(dir.path().join("v"), &v).unwrap();
            let back = load_volume(dir.path().join("v.json")).unwrap();
            prop_assert_eq!(
                back.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
            prop_assert_eq!(back.spacing, v.spacing);
        }
    }
}
