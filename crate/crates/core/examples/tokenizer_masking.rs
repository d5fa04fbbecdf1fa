//! Patchify a view, draw an exact-count block mask and broadcast it to tokens.
//!
//! `cargo run --release --example tokenizer_masking`

use anyhow::Result;
use smit::tokenizer::{broadcast_mask, patchify, sample_mask, unpatchify};
use smit::volume_io::{generate_phantom, PhantomSpec};

fn main() -> Result<()> {
    let (volume, _) = generate_phantom(&PhantomSpec {
        size: [32; 3],
        num_blobs: 3,
        seed: 2,
        noise_std: 0.0,
        bias_field: false,
    })?;
    let grid = patchify(&volume, 4)?;
    println!("{} tokens of {} voxels", grid.num_tokens(), grid.token(0).len());
    assert_eq!(unpatchify(&grid, &volume)?, volume);

    // an 8³ token grid masked in 2³ token blocks: 64 mask cells
    let mask = sample_mask(64, 0.7, 7)?;
    let tokens = broadcast_mask(&mask, 8, 2)?;
    println!(
        "masked {} of {} cells ({:.3}), {} of {} tokens",
        mask.count(),
        mask.len(),
        mask.ratio(),
        tokens.iter().filter(|&&b| b).count(),
        tokens.len()
    );
    Ok(())
}
