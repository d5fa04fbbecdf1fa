//! K-fold cross-validation of fine-tuning on named phantom cases.
//!
//! `cargo run --release --example cross_validation [out_dir]`

use anyhow::Result;
use smit::harness::cross_validate;
use smit::segmentation::FinetuneConfig;
use smit::volume_io::{generate_phantoms, PhantomSpec};

fn main() -> Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("smit-cv"), Into::into);
    let specs: Vec<PhantomSpec> = (0..6)
        .map(|seed| PhantomSpec {
            size: [40; 3],
            num_blobs: 4,
            seed: 200 + seed,
            noise_std: 0.08,
            bias_field: true,
        })
        .collect();
    let cases: Vec<_> = generate_phantoms(&specs)?
        .into_iter()
        .enumerate()
        .map(|(i, (v, l))| (format!("case_{i:02}"), v, l))
        .collect();
    let cfg = FinetuneConfig {
        epochs: 5,
        warmup_epochs: 1,
        lr0: 1e-2,
        ..FinetuneConfig::default()
    };
    for f in cross_validate(&cfg, &cases, 3, &out)? {
        println!("fold {}: {:?} mean Dice {:.4}", f.fold, f.cases, f.mean_dice);
    }
    Ok(())
}
