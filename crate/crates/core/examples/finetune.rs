//! Fine-tune a segmenter from random initialization and validate it.
//!
//! `cargo run --release --example finetune [out_dir] [pretrain_checkpoint]`

use anyhow::Result;
use smit::distiller::RunOptions;
use smit::segmentation::{finetune, FinetuneConfig};
use smit::volume_io::{generate_phantoms, PhantomSpec};

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map_or_else(|| std::env::temp_dir().join("smit-finetune"), Into::into);
    let init = args.next().map(Into::into);
    let specs: Vec<PhantomSpec> = (0..4)
        .map(|seed| PhantomSpec {
            size: [40; 3],
            num_blobs: 4,
            seed: 100 + seed,
            noise_std: 0.08,
            bias_field: true,
        })
        .collect();
    let cases = generate_phantoms(&specs)?;
    let (train, val) = cases.split_at(3);
    let cfg = FinetuneConfig {
        init,
        epochs: 20,
        warmup_epochs: 2,
        lr0: 1e-2,
        val_every: 5,
        ..FinetuneConfig::default()
    };
    let _ = std::fs::remove_dir_all(&out);
    let run = finetune(&cfg, train, val, &out, &RunOptions::default())?;
    for v in &run.validation {
        println!("epoch {:>3}: validation mean Dice {:.4}", v.epoch, v.mean_dice);
    }
    println!("checkpoint {}", run.checkpoint.display());
    Ok(())
}
