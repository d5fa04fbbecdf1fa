//! Patch tokenization and block masking.
//!
//! Masks are sampled on a coarse grid (one bit per `mask_grid_downsample³`
//! block of patch tokens) with an exact number of ones, then broadcast to the
//! patch-token grid.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{index_tensor, invert_permutation};
use crate::volume_io::Volume;

/// Non-overlapping `P³` patches of a cubic view in `(z, y, x)` raster order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    /// Patches per axis, `G = S / P`.
    pub grid: usize,
    pub patch_size: usize,
    /// `G³` rows of `P³` voxels each, row-major.
    pub tokens: Vec<f32>,
}

impl PatchGrid {
    pub fn num_tokens(&self) -> usize {
        self.grid.pow(3)
    }

    pub fn token(&self, i: usize) -> &[f32] {
        let len = self.patch_size.pow(3);
        &self.tokens[i * len..(i + 1) * len]
    }
}

/// For a cube of edge `size` cut into `patch³` blocks, the raster voxel index
/// of every (token, in-patch offset) pair in token-major order.
pub fn patch_gather_index(size: usize, patch: usize) -> Vec<usize> {
    let g = size / patch;
    let mut idx = Vec::with_capacity(size.pow(3));
    for tz in 0..g {
        for ty in 0..g {
            for tx in 0..g {
                for pz in 0..patch {
                    for py in 0..patch {
                        for px in 0..patch {
                            let (z, y, x) = (tz * patch + pz, ty * patch + py, tx * patch + px);
                            idx.push((z * size + y) * size + x);
                        }
                    }
                }
            }
        }
    }
    idx
}

fn check_cube(shape: [usize; 3], patch: usize) -> Result<usize> {
    let s = shape[0];
    if shape[1] != s || shape[2] != s {
        return Err(Error::Geometry(format!("view must be cubic, got {shape:?}")));
    }
    if patch == 0 || !s.is_multiple_of(patch) {
        return Err(Error::Geometry(format!("view size {s} not divisible by patch size {patch}")));
    }
    Ok(s)
}

pub fn patchify(view: &Volume, patch_size: usize) -> Result<PatchGrid> {
    let s = check_cube(view.shape(), patch_size)?;
    let data = view.data();
    let tokens = patch_gather_index(s, patch_size).into_iter().map(|i| data[i]).collect();
    Ok(PatchGrid {
        grid: s / patch_size,
        patch_size,
        tokens,
    })
}

/// Inverse of [`patchify`]; spacing and modality are taken from `like`.
pub fn unpatchify(grid: &PatchGrid, like: &Volume) -> Result<Volume> {
    let s = grid.grid * grid.patch_size;
    let mut data = vec![0.0f32; s.pow(3)];
    for (src, dst) in patch_gather_index(s, grid.patch_size).into_iter().enumerate() {
        data[dst] = grid.tokens[src];
    }
    Volume::new([s, s, s], data, like.spacing, like.modality)
}

/// Tensor form of patchify: `(B, S³)` raster voxels to `(B, G³, P³)`.
pub fn patchify_tensor(x: &Tensor, size: usize, patch: usize) -> Result<Tensor> {
    let b = x.dim(0)?;
    let idx = index_tensor(&patch_gather_index(size, patch))?;
    Ok(x.index_select(&idx, 1)?.reshape((b, (size / patch).pow(3), patch.pow(3)))?)
}

/// Tensor form of unpatchify: `(B, G³, P³)` to `(B, S³)` raster voxels.
pub fn unpatchify_tensor(x: &Tensor, size: usize, patch: usize) -> Result<Tensor> {
    let b = x.dim(0)?;
    let inv = index_tensor(&invert_permutation(&patch_gather_index(size, patch)))?;
    Ok(x.reshape((b, size.pow(3)))?.index_select(&inv, 1)?)
}

/// Binary mask over the coarse mask grid; `true` means masked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskVector {
    pub bits: Vec<bool>,
    pub ratio_milli: u32,
}

impl MaskVector {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn ratio(&self) -> f64 {
        self.ratio_milli as f64 / 1000.0
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            bits: vec![false; n],
            ratio_milli: 0,
        }
    }

    pub fn ones(n: usize) -> Self {
        Self {
            bits: vec![true; n],
            ratio_milli: 1000,
        }
    }
}

/// Number of masked positions for a ratio: `round(ratio * n)`.
pub fn mask_count(n_mask: usize, ratio: f64) -> usize {
    ((ratio * n_mask as f64).round() as usize).min(n_mask)
}

/// Exactly `round(ratio * n_mask)` positions set, chosen uniformly without replacement.
pub fn sample_mask(n_mask: usize, ratio: f64, rng_seed: u64) -> Result<MaskVector> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let k = mask_count(n_mask, ratio);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut bits = vec![false; n_mask];
    for i in rand::seq::index::sample(&mut rng, n_mask, k) {
        bits[i] = true;
    }
    Ok(MaskVector {
        bits,
        ratio_milli: (ratio * 1000.0).round() as u32,
    })
}

/// Maps every patch token (raster over `token_grid³`) to its coarse mask cell
/// (raster over `(token_grid / block)³`).
pub fn token_to_mask_cell(token_grid: usize, block: usize) -> Result<Vec<usize>> {
    if block == 0 || !token_grid.is_multiple_of(block) {
        return Err(Error::Geometry(format!(
            "token grid {token_grid} not divisible by mask block {block}"
        )));
    }
    let mg = token_grid / block;
    let mut out = Vec::with_capacity(token_grid.pow(3));
    for z in 0..token_grid {
        for y in 0..token_grid {
            for x in 0..token_grid {
                out.push(((z / block) * mg + y / block) * mg + x / block);
            }
        }
    }
    Ok(out)
}

/// Broadcasts a coarse mask to the token grid.
pub fn broadcast_mask(m: &MaskVector, token_grid: usize, block: usize) -> Result<Vec<bool>> {
    let cells = token_to_mask_cell(token_grid, block)?;
    let expected = (token_grid / block).pow(3);
    if m.len() != expected {
        return Err(Error::Shape(format!("mask of length {} on a grid of {expected} cells", m.len())));
    }
    Ok(cells.into_iter().map(|c| m.bits[c]).collect())
}

/// Stacks masks into a `(B, n)` tensor of 0/1 in `dtype`.
pub fn mask_tensor(masks: &[&MaskVector], dtype: DType) -> Result<Tensor> {
    let n = masks.first().map_or(0, |m| m.len());
    if masks.iter().any(|m| m.len() != n) {
        return Err(Error::Shape("masks in a batch differ in length".into()));
    }
    let flat: Vec<f64> = masks
        .iter()
        .flat_map(|m| m.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(flat, (masks.len(), n), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Replaces embeddings of masked tokens with the mask token.
///
/// `embeddings` is `(B, N, C)`, `token_mask` is `(B, N)` with 1 for masked
/// (any dtype), `mask_token` is `(C)`. Unmasked rows are passed through
/// untouched.
pub fn apply_mask(embeddings: &Tensor, token_mask: &Tensor, mask_token: &Tensor) -> Result<Tensor> {
    let (b, n, c) = embeddings.dims3()?;
    if token_mask.dims() != [b, n] {
        return Err(Error::Shape(format!(
            "mask {:?} does not match embeddings {:?}",
            token_mask.dims(),
            embeddings.dims()
        )));
    }
    if mask_token.dims() != [c] {
        return Err(Error::Shape(format!("mask token {:?} vs width {c}", mask_token.dims())));
    }
    let cond = token_mask.to_dtype(DType::U8)?.unsqueeze(2)?.broadcast_as((b, n, c))?;
    let fill = mask_token.reshape((1, 1, c))?.broadcast_as((b, n, c))?;
    Ok(cond.where_cond(&fill, embeddings)?)
}
