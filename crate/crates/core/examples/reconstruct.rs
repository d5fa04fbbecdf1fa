//! Masked-input reconstruction with a pre-training checkpoint.
//!
//! `cargo run --release --example reconstruct <pretrain_checkpoint> [out_dir]`

use anyhow::{Context, Result};
use smit::harness::reconstruct_report;
use smit::volume_io::{generate_phantoms, PhantomSpec};

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let checkpoint: std::path::PathBuf = args.next().context("usage: reconstruct <pretrain_checkpoint> [out_dir]")?.into();
    let out = args.next().map_or_else(|| std::env::temp_dir().join("smit-reconstruct"), Into::into);
    let specs: Vec<PhantomSpec> = (0..2)
        .map(|seed| PhantomSpec {
            size: [40; 3],
            num_blobs: 4,
            seed: 500 + seed,
            noise_std: 0.08,
            bias_field: true,
        })
        .collect();
    let volumes: Vec<_> = generate_phantoms(&specs)?
        .into_iter()
        .enumerate()
        .map(|(i, (v, _))| (format!("held_out_{i}"), v))
        .collect();
    std::fs::create_dir_all(&out)?;
    for ratio in [0.1, 0.4, 0.7] {
        let r = reconstruct_report(&checkpoint, &volumes, ratio, 0, Some(&out))?;
        println!("mask ratio {ratio}: mean MSE {:?}", r.mean_mse);
    }
    println!("volumes written to {}", out.display());
    Ok(())
}
