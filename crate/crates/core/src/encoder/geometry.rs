//! Index maps for window partitioning, cyclic shifts, patch merging and
//! stride-2 upsampling. Every spatial rearrangement in the encoder is a
//! token permutation applied with `index_select`, so all of them are
//! differentiable and exactly invertible.

use candle_core::{DType, Device, Tensor};

use crate::error::Result;
use crate::nn::{index_tensor, invert_permutation};
use crate::tokenizer::patch_gather_index;

/// Additive attention bias for token pairs that must not attend to each other.
pub const MASKED_LOGIT: f64 = -1e9;

/// One way of cutting a `grid³` token raster into `window³` windows.
#[derive(Debug, Clone)]
pub struct WindowLayout {
    pub num_windows: usize,
    pub tokens_per_window: usize,
    /// Raster index of the token at each window-ordered position.
    pub gather: Tensor,
    /// Inverse of `gather`.
    pub scatter: Tensor,
    /// `(1, nW, 1, T, T)` additive bias, present for shifted layouts.
    pub bias: Option<Tensor>,
}

/// Raster positions in window order after cyclically shifting the grid by
/// `shift` (token at shifted coordinate `c` comes from `(c + shift) mod grid`).
pub fn window_order(grid: usize, window: usize, shift: usize) -> Vec<usize> {
    patch_gather_index(grid, window)
        .into_iter()
        .map(|r| {
            let (z, y, x) = (r / (grid * grid), (r / grid) % grid, r % grid);
            let (z, y, x) = ((z + shift) % grid, (y + shift) % grid, (x + shift) % grid);
            (z * grid + y) * grid + x
        })
        .collect()
}

/// Region id of a shifted coordinate: tokens that wrapped around must not
/// mix with their new neighbours.
fn region(c: usize, grid: usize, window: usize, shift: usize) -> usize {
    if c < grid - window {
        0
    } else if c < grid - shift {
        1
    } else {
        2
    }
}

/// `(nW, T, T)` 0/1 matrix of allowed attention pairs in a shifted layout.
pub fn shifted_window_allowed(grid: usize, window: usize, shift: usize) -> Vec<bool> {
    let order = patch_gather_index(grid, window);
    let t = window.pow(3);
    let nw = order.len() / t;
    let label = |r: usize| {
        let (z, y, x) = (r / (grid * grid), (r / grid) % grid, r % grid);
        (region(z, grid, window, shift), region(y, grid, window, shift), region(x, grid, window, shift))
    };
    let mut allowed = Vec::with_capacity(nw * t * t);
    for w in 0..nw {
        for i in 0..t {
            for j in 0..t {
                allowed.push(label(order[w * t + i]) == label(order[w * t + j]));
            }
        }
    }
    allowed
}

impl WindowLayout {
    pub fn new(grid: usize, window: usize, shift: usize, dtype: DType) -> Result<Self> {
        let order = window_order(grid, window, shift);
        let t = window.pow(3);
        let nw = order.len() / t;
        let bias = if shift > 0 {
            let values: Vec<f64> = shifted_window_allowed(grid, window, shift)
                .into_iter()
                .map(|ok| if ok { 0.0 } else { MASKED_LOGIT })
                .collect();
            Some(Tensor::from_vec(values, (1, nw, 1, t, t), &Device::Cpu)?.to_dtype(dtype)?)
        } else {
            None
        };
        Ok(Self {
            num_windows: nw,
            tokens_per_window: t,
            scatter: index_tensor(&invert_permutation(&order))?,
            gather: index_tensor(&order)?,
            bias,
        })
    }
}

/// Groups each 2×2×2 neighbourhood of a `grid³` raster consecutively.
pub fn merge_index(grid: usize) -> Result<Tensor> {
    index_tensor(&patch_gather_index(grid, 2))
}

/// Maps `(coarse token, 2×2×2 child)` order on a `2·coarse` grid back to raster.
pub fn upsample_index(coarse: usize) -> Result<Tensor> {
    index_tensor(&invert_permutation(&patch_gather_index(2 * coarse, 2)))
}
