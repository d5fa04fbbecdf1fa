//! Run the desk-scale encoder with and without a mask and reconstruct pixels.
//!
//! `cargo run --release --example encoder_forward`

use anyhow::Result;
use candle_core::DType;
use smit::distiller::stack_views;
use smit::encoder::{init_student_params, project_heads, Encoder, EncoderConfig};
use smit::nn::index_tensor;
use smit::tokenizer::{mask_tensor, sample_mask, token_to_mask_cell};
use smit::volume_io::{generate_phantom, PhantomSpec};

fn main() -> Result<()> {
    let cfg = EncoderConfig::desk();
    let params = init_student_params(&cfg, 0, DType::F32)?;
    println!("desk encoder + heads: {} parameters", params.num_scalars());
    let (volume, _) = generate_phantom(&PhantomSpec {
        size: [cfg.view_size; 3],
        num_blobs: 4,
        seed: 3,
        noise_std: 0.08,
        bias_field: true,
    })?;
    let encoder = Encoder::new(&cfg, DType::F32)?;
    let views = stack_views(&[&volume], DType::F32)?;

    let clean = encoder.forward(&params, &views, None)?;
    let (patch_logits, cls_logits) = project_heads(&params, &clean)?;
    println!(
        "patch embeddings {:?}, global {:?}, patch logits {:?}, global logits {:?}",
        clean.patch_embeddings.dims(),
        clean.global_embedding.dims(),
        patch_logits.dims(),
        cls_logits.dims()
    );

    let mask = sample_mask(cfg.num_final_tokens(), 0.7, 1)?;
    let cells = index_tensor(&token_to_mask_cell(cfg.token_grid(), cfg.mask_grid_downsample)?)?;
    let token_mask = mask_tensor(&[&mask], DType::F32)?.index_select(&cells, 1)?;
    let masked = encoder.forward(&params, &views, Some(&token_mask))?;
    let recon = encoder.blocks_to_views(&encoder.predict_pixels(&params, &masked)?)?;
    println!("reconstruction {:?} from {} masked cells", recon.dims(), mask.count());
    Ok(())
}
