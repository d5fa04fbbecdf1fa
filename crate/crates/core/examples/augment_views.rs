//! Two overlapping random views of one volume, as used for pre-training.
//!
//! `cargo run --release --example augment_views`

use anyhow::Result;
use smit::augment::{sample_two_views, AugmentConfig};
use smit::volume_io::{generate_phantom, PhantomSpec};

fn main() -> Result<()> {
    let (volume, _) = generate_phantom(&PhantomSpec {
        size: [48, 40, 36],
        num_blobs: 4,
        seed: 1,
        noise_std: 0.08,
        bias_field: true,
    })?;
    let cfg = AugmentConfig {
        view_size: 32,
        granularity: 8,
        flip_prob: 0.5,
        jitter: 0.05,
    };
    for seed in 0..3 {
        let pair = sample_two_views(&volume, &cfg, seed)?;
        println!(
            "seed {seed}: padding {:?}, u at {:?}, v at {:?}, view shape {:?}",
            pair.padding,
            pair.u.origin,
            pair.v.origin,
            pair.u.data.shape()
        );
    }
    Ok(())
}
