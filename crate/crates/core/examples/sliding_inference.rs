//! Sliding-window segmentation of a volume larger than the model window.
//!
//! `cargo run --release --example sliding_inference [finetune_checkpoint]`

use anyhow::Result;
use smit::segmentation::{
    dice_score, initial_seg_params, load_seg_model, sliding_window_infer, window_origins, FinetuneConfig, SegModel,
    VoxelClassifier,
};
use smit::volume_io::{generate_phantom, PhantomSpec};

fn main() -> Result<()> {
    let model = match std::env::args().nth(1) {
        Some(dir) => load_seg_model(dir)?,
        None => {
            let cfg = FinetuneConfig::default();
            SegModel::new(&cfg.seg, initial_seg_params(&cfg)?)?
        }
    };
    let (volume, labels) = generate_phantom(&PhantomSpec {
        size: [56, 48, 40],
        num_blobs: 4,
        seed: 9,
        noise_std: 0.08,
        bias_field: true,
    })?;
    let w = model.window();
    for (axis, len) in volume.shape().into_iter().enumerate() {
        println!("axis {axis}: origins {:?}", window_origins(len, w, 0.5)?);
    }
    let pred = sliding_window_infer(&model, &volume, 0.5)?;
    let table = dice_score(&pred, &labels)?;
    println!("mean Dice {:.4}, per class {:?}", table.mean, table.per_class);
    Ok(())
}
