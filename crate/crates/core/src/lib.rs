//! Self-supervised pre-training of 3D windowed-attention transformers by
//! masked image prediction combined with patch-token and global-token
//! self-distillation, plus fine-tuning to multi-organ segmentation.
//!
//! The crate is organised bottom-up:
//!
//! - [`volume_io`]: volumes, label maps, the native on-disk format, phantoms
//! - [`augment`]: two-view random cropping
//! - [`tokenizer`]: patchify, exact-count block masks, mask-token substitution
//! - [`encoder`]: the hierarchical encoder, prediction and projection heads
//! - [`ssl_objectives`]: the pre-training losses, sharpening and centering
//! - [`distiller`]: EMA teacher, schedules, the pre-training loop, checkpoints
//! - [`segmentation`]: fine-tuning, Dice, sliding-window inference
//! - [`harness`]: configuration, experiment runner and the command-line surface

pub mod augment;
pub mod distiller;
pub mod encoder;
pub mod error;
pub mod harness;
mod kernels;
pub mod nn;
pub mod seed;
pub mod segmentation;
pub mod ssl_objectives;
pub mod tokenizer;
pub mod volume_io;

pub use error::{Error, Result};
