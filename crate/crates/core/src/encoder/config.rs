use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel-prediction decoder variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DecoderKind {
    /// A single affine map from each final token to its voxel block.
    OneLayer,
    /// A stack of stride-2 transposed convolutions back to voxel resolution.
    MultiLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Edge of the cubic input view, `S`.
    pub view_size: usize,
    /// Edge of a patch token, `P`.
    pub patch_size: usize,
    /// Width of the final stage (the embedding the heads consume).
    pub embed_dim: usize,
    /// Double the width at every stage (the SWIN layout); otherwise constant.
    pub width_doubling: bool,
    pub depths: Vec<usize>,
    pub num_heads: Vec<usize>,
    /// Attention window edge, in tokens.
    pub window: usize,
    pub mlp_ratio: usize,
    /// Output dimension `K` of the patch and global projection heads.
    pub proj_dim: usize,
    pub decoder_kind: DecoderKind,
    /// Patch tokens per mask cell along each axis; equals the total stage downsampling.
    pub mask_grid_downsample: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    /// The full-size geometry: 96³ views, patch 2, four stages ending at 768
    /// channels on a 6³ grid, window 4.
    pub fn full_scale() -> Self {
        Self {
            view_size: 96,
            patch_size: 2,
            embed_dim: 768,
            width_doubling: true,
            depths: vec![2, 2, 18, 2],
            num_heads: vec![3, 6, 12, 24],
            window: 4,
            mlp_ratio: 4,
            proj_dim: 4096,
            decoder_kind: DecoderKind::OneLayer,
            mask_grid_downsample: 8,
        }
    }

    /// A CPU-trainable preset under 10⁵ parameters that exercises every code path.
    pub fn desk() -> Self {
        Self {
            view_size: 32,
            patch_size: 4,
            embed_dim: 32,
            width_doubling: false,
            depths: vec![2, 2],
            num_heads: vec![2, 2],
            window: 4,
            mlp_ratio: 2,
            proj_dim: 256,
            decoder_kind: DecoderKind::OneLayer,
            mask_grid_downsample: 2,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.depths.len()
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        if self.width_doubling {
            self.embed_dim >> (self.num_stages() - 1 - stage)
        } else {
            self.embed_dim
        }
    }

    /// Token grid edge at `stage`.
    pub fn stage_grid(&self, stage: usize) -> usize {
        (self.view_size / self.patch_size) >> stage
    }

    pub fn token_grid(&self) -> usize {
        self.stage_grid(0)
    }

    pub fn final_grid(&self) -> usize {
        self.stage_grid(self.num_stages() - 1)
    }

    pub fn num_tokens(&self) -> usize {
        self.token_grid().pow(3)
    }

    pub fn num_final_tokens(&self) -> usize {
        self.final_grid().pow(3)
    }

    /// Voxels per axis covered by one final-grid token.
    pub fn effective_patch(&self) -> usize {
        self.patch_size * self.mask_grid_downsample
    }

    /// Attention window edge at `stage`: the configured window, or the whole
    /// grid when the grid is smaller than two windows and not a multiple.
    pub fn stage_window(&self, stage: usize) -> usize {
        let g = self.stage_grid(stage);
        if g <= self.window || (!g.is_multiple_of(self.window) && g < 2 * self.window) {
            g
        } else {
            self.window
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Geometry(msg));
        let n = self.num_stages();
        if n == 0 || self.num_heads.len() != n {
            return bad(format!(
                "{} stage depths but {} head counts",
                self.depths.len(),
                self.num_heads.len()
            ));
        }
        if self.patch_size == 0 || !self.view_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "view size {} not divisible by patch size {}",
                self.view_size, self.patch_size
            ));
        }
        if self.mask_grid_downsample != 1 << (n - 1) {
            return bad(format!(
                "{n} stages downsample by {} but mask_grid_downsample is {}",
                1 << (n - 1),
                self.mask_grid_downsample
            ));
        }
        let g0 = self.token_grid();
        if !g0.is_multiple_of(self.mask_grid_downsample) {
            return bad(format!(
                "token grid {g0} not divisible by {}",
                self.mask_grid_downsample
            ));
        }
        if self.width_doubling && !self.embed_dim.is_multiple_of(1 << (n - 1)) {
            return bad(format!("embed_dim {} cannot be halved {} times", self.embed_dim, n - 1));
        }
        for s in 0..n {
            let (dim, heads) = (self.stage_dim(s), self.num_heads[s]);
            if heads == 0 || dim % heads != 0 {
                return bad(format!("stage {s}: width {dim} not divisible by {heads} heads"));
            }
            let (g, w) = (self.stage_grid(s), self.stage_window(s));
            if g % w != 0 {
                return bad(format!("stage {s}: grid {g} not divisible by window {w}"));
            }
        }
        let p = self.effective_patch();
        if !p.is_power_of_two() || !self.patch_size.is_power_of_two() {
            return bad(format!("patch sizes must be powers of two, got {} / {p}", self.patch_size));
        }
        if self.window == 0 || self.mlp_ratio == 0 || self.proj_dim == 0 {
            return bad("window, mlp_ratio and proj_dim must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_geometry() {
        let c = EncoderConfig::full_scale();
        c.validate().unwrap();
        assert_eq!(c.token_grid(), 48);
        assert_eq!(c.final_grid(), 6);
        assert_eq!(c.num_final_tokens(), 216);
        assert_eq!(c.effective_patch(), 16);
        assert_eq!(c.stage_dim(0), 96);
        assert_eq!(c.stage_dim(3), 768);
        assert_eq!(c.stage_window(0), 4);
        assert_eq!(c.stage_window(3), 6);
    }

    #[test]
    fn desk_geometry() {
        let c = EncoderConfig::desk();
        c.validate().unwrap();
        assert_eq!(c.token_grid(), 8);
        assert_eq!(c.final_grid(), 4);
        assert_eq!(c.effective_patch(), 8);
    }

    #[test]
    fn inconsistent_downsampling_is_rejected() {
        let c = EncoderConfig {
            mask_grid_downsample: 4,
            ..EncoderConfig::desk()
        };
        assert!(matches!(c.validate(), Err(Error::Geometry(_))));
        let c = EncoderConfig {
            num_heads: vec![3, 2],
            ..EncoderConfig::desk()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn decoder_kind_serializes_in_caps() {
        assert_eq!(serde_json::to_string(&DecoderKind::OneLayer).unwrap(), "\"ONE_LAYER\"");
        assert_eq!(serde_json::to_string(&DecoderKind::MultiLayer).unwrap(), "\"MULTI_LAYER\"");
    }
}
