//! Hierarchical windowed-attention encoder and its heads.
//!
//! Stage `s` runs `depths[s]` pre-norm transformer blocks with multi-head
//! self-attention restricted to `window³` token windows; odd blocks use
//! cyclically shifted windows. Stages are joined by 2×2×2 patch merging, so
//! the final grid is `mask_grid_downsample` times coarser than the patch grid.
//! Positions are learned absolute embeddings added after mask substitution.

mod config;
pub mod geometry;

pub use config::{DecoderKind, EncoderConfig};

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{gather_tokens, gelu, layer_norm, linear, softmax_last, ParamBuilder, Params};
use crate::tokenizer::{apply_mask, patchify_tensor, unpatchify_tensor};
use geometry::{merge_index, upsample_index, WindowLayout};

#[derive(Debug, Clone)]
struct Stage {
    dim: usize,
    heads: usize,
    regular: WindowLayout,
    shifted: Option<WindowLayout>,
    /// Gather index for merging this stage's output into the next stage.
    merge: Option<Tensor>,
}

/// Per-token embeddings on the final grid plus one global embedding per view.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `(B, N_out, E)`.
    pub patch_embeddings: Tensor,
    /// `(B, E)`: mean of the final patch embeddings.
    pub global_embedding: Tensor,
    /// Output of every stage before merging, `(B, N_s, C_s)`.
    pub stage_features: Vec<Tensor>,
}

/// Geometry and forward logic; parameters are passed in per call so the same
/// encoder serves student, teacher and fine-tuned models.
#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    dtype: DType,
    patch_index: Tensor,
    stages: Vec<Stage>,
}

/// Declares the backbone parameters (`enc.*`).
pub fn declare_encoder(cfg: &EncoderConfig, b: &mut ParamBuilder) -> Result<()> {
    cfg.validate()?;
    let c0 = cfg.stage_dim(0);
    b.linear("enc.patch_embed", cfg.patch_size.pow(3), c0, true)?;
    b.trunc_normal("enc.pos_embed", &[cfg.num_tokens(), c0], 0.02)?;
    for s in 0..cfg.num_stages() {
        let c = cfg.stage_dim(s);
        let hidden = c * cfg.mlp_ratio;
        for j in 0..cfg.depths[s] {
            let pre = format!("enc.s{s}.b{j}");
            b.layer_norm(&format!("{pre}.norm1"), c)?;
            b.linear(&format!("{pre}.attn.qkv"), c, 3 * c, true)?;
            b.linear(&format!("{pre}.attn.proj"), c, c, true)?;
            b.layer_norm(&format!("{pre}.norm2"), c)?;
            b.linear(&format!("{pre}.mlp.fc1"), c, hidden, true)?;
            b.linear(&format!("{pre}.mlp.fc2"), hidden, c, true)?;
        }
        if s + 1 < cfg.num_stages() {
            b.layer_norm(&format!("enc.s{s}.merge.norm"), 8 * c)?;
            b.linear(&format!("enc.s{s}.merge.reduce"), 8 * c, cfg.stage_dim(s + 1), false)?;
        }
    }
    b.layer_norm("enc.norm", cfg.embed_dim)
}

/// Declares `h_patch` and `h_cls` (`head.patch`, `head.cls`).
pub fn declare_projection_heads(cfg: &EncoderConfig, b: &mut ParamBuilder) -> Result<()> {
    b.linear("head.patch", cfg.embed_dim, cfg.proj_dim, true)?;
    b.linear("head.cls", cfg.embed_dim, cfg.proj_dim, true)
}

/// Output widths of the multi-layer decoder's upsampling layers.
pub fn multi_layer_widths(cfg: &EncoderConfig) -> Vec<usize> {
    let n_up = cfg.effective_patch().trailing_zeros() as usize;
    (0..n_up)
        .map(|i| if i + 1 == n_up { (cfg.embed_dim / 4).max(1) } else { cfg.embed_dim })
        .collect()
}

/// Declares the pixel-prediction head `h_pred` (`pred.*`).
pub fn declare_pixel_head(cfg: &EncoderConfig, b: &mut ParamBuilder) -> Result<()> {
    match cfg.decoder_kind {
        DecoderKind::OneLayer => b.linear("pred.fc", cfg.embed_dim, cfg.effective_patch().pow(3), true),
        DecoderKind::MultiLayer => {
            let mut c_in = cfg.embed_dim;
            for (i, c_out) in multi_layer_widths(cfg).into_iter().enumerate() {
                declare_upsample(b, &format!("pred.up{i}"), c_in, c_out)?;
                c_in = c_out;
            }
            b.linear("pred.out", c_in, 1, true)
        }
    }
}

/// A stride-2, kernel-2 transposed convolution: weight `(C_in, 8·C_out)`, bias `(C_out)`.
pub fn declare_upsample(b: &mut ParamBuilder, prefix: &str, c_in: usize, c_out: usize) -> Result<()> {
    b.trunc_normal(&format!("{prefix}.w"), &[c_in, 8 * c_out], 0.02)?;
    b.constant(&format!("{prefix}.b"), &[c_out], 0.0)
}

/// Applies [`declare_upsample`] parameters to tokens on a `grid³` raster,
/// producing tokens on the `(2·grid)³` raster.
pub fn upsample(x: &Tensor, p: &Params, prefix: &str, grid: usize) -> Result<Tensor> {
    let (b, n, c_in) = x.dims3()?;
    let w = p.get(&format!("{prefix}.w"))?;
    let bias = p.get(&format!("{prefix}.b"))?;
    let c_out = bias.dim(0)?;
    let y = x.reshape((b * n, c_in))?.matmul(w)?.reshape((b, n * 8, c_out))?;
    let y = gather_tokens(&y, &upsample_index(grid)?)?;
    Ok(y.broadcast_add(bias)?)
}

/// Initial student parameters: backbone, projection heads, pixel head and mask token.
pub fn init_student_params(cfg: &EncoderConfig, seed: u64, dtype: DType) -> Result<Params> {
    let mut b = ParamBuilder::new(seed, dtype);
    declare_encoder(cfg, &mut b)?;
    declare_projection_heads(cfg, &mut b)?;
    declare_pixel_head(cfg, &mut b)?;
    b.trunc_normal("mask_token", &[cfg.stage_dim(0)], 0.02)?;
    Ok(b.finish())
}

/// Parameter-name prefixes shared by student and teacher.
pub const TEACHER_PREFIXES: [&str; 2] = ["enc.", "head."];

/// Number of scalars in the pixel head for a decoder kind.
pub fn pixel_head_param_count(cfg: &EncoderConfig) -> Result<usize> {
    let mut b = ParamBuilder::new(0, DType::F32);
    declare_pixel_head(cfg, &mut b)?;
    Ok(b.finish().num_scalars())
}

impl Encoder {
    pub fn new(cfg: &EncoderConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(cfg.num_stages());
        for s in 0..cfg.num_stages() {
            let (grid, window) = (cfg.stage_grid(s), cfg.stage_window(s));
            let shift = if grid > window { window / 2 } else { 0 };
            stages.push(Stage {
                dim: cfg.stage_dim(s),
                heads: cfg.num_heads[s],
                regular: WindowLayout::new(grid, window, 0, dtype)?,
                shifted: if shift > 0 {
                    Some(WindowLayout::new(grid, window, shift, dtype)?)
                } else {
                    None
                },
                merge: if s + 1 < cfg.num_stages() {
                    Some(merge_index(grid)?)
                } else {
                    None
                },
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            dtype,
            patch_index: crate::nn::index_tensor(&crate::tokenizer::patch_gather_index(
                cfg.view_size,
                cfg.patch_size,
            ))?,
            stages,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Patch embedding with optional mask substitution, then positions.
    ///
    /// `views` is `(B, S³)` raster voxels; `token_mask` is `(B, N)` over the
    /// patch-token grid with 1 for masked tokens.
    pub fn embed(&self, p: &Params, views: &Tensor, token_mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, voxels) = views.dims2()?;
        let s = self.cfg.view_size;
        if voxels != s.pow(3) {
            return Err(Error::Geometry(format!("expected {} voxels per view, got {voxels}", s.pow(3))));
        }
        let patches = views
            .index_select(&self.patch_index, 1)?
            .reshape((b, self.cfg.num_tokens(), self.cfg.patch_size.pow(3)))?;
        let mut x = linear(&patches, p, "enc.patch_embed")?;
        if let Some(m) = token_mask {
            x = apply_mask(&x, m, p.get("mask_token")?)?;
        }
        Ok(x.broadcast_add(p.get("enc.pos_embed")?)?)
    }

    /// Runs all stages on already-embedded tokens `(B, N, C_0)`.
    pub fn encode(&self, p: &Params, tokens: &Tensor) -> Result<EncoderOutput> {
        let (_, n, c) = tokens.dims3()?;
        if n != self.cfg.num_tokens() || c != self.cfg.stage_dim(0) {
            return Err(Error::Geometry(format!(
                "expected ({}, {}) tokens, got ({n}, {c})",
                self.cfg.num_tokens(),
                self.cfg.stage_dim(0)
            )));
        }
        let mut x = tokens.clone();
        let mut stage_features = Vec::with_capacity(self.stages.len());
        for (s, stage) in self.stages.iter().enumerate() {
            for j in 0..self.cfg.depths[s] {
                x = self.block(p, &x, s, j)?;
            }
            stage_features.push(x.clone());
            if let Some(idx) = &stage.merge {
                let (b, n, c) = x.dims3()?;
                let grouped = gather_tokens(&x, idx)?.reshape((b, n / 8, 8 * c))?;
                let normed = layer_norm(&grouped, p, &format!("enc.s{s}.merge.norm"))?;
                x = linear(&normed, p, &format!("enc.s{s}.merge.reduce"))?;
            }
        }
        let patch_embeddings = layer_norm(&x, p, "enc.norm")?;
        let global_embedding = patch_embeddings.mean(1)?;
        Ok(EncoderOutput {
            patch_embeddings,
            global_embedding,
            stage_features,
        })
    }

    pub fn forward(&self, p: &Params, views: &Tensor, token_mask: Option<&Tensor>) -> Result<EncoderOutput> {
        let tokens = self.embed(p, views, token_mask)?;
        self.encode(p, &tokens)
    }

    /// Block `j` of stage `s` on `(B, N_s, C_s)` raster tokens.
    pub fn block(&self, p: &Params, x: &Tensor, s: usize, j: usize) -> Result<Tensor> {
        let stage = &self.stages[s];
        let pre = format!("enc.s{s}.b{j}");
        let layout = match (&stage.shifted, j % 2) {
            (Some(shifted), 1) => shifted,
            _ => &stage.regular,
        };
        let h = layer_norm(x, p, &format!("{pre}.norm1"))?;
        let a = self.window_attention(p, &h, layout, stage, &format!("{pre}.attn"))?;
        let x = (x + a)?;
        let h = layer_norm(&x, p, &format!("{pre}.norm2"))?;
        let h = gelu(&linear(&h, p, &format!("{pre}.mlp.fc1"))?)?;
        let h = linear(&h, p, &format!("{pre}.mlp.fc2"))?;
        Ok((x + h)?)
    }

    fn window_attention(
        &self,
        p: &Params,
        x: &Tensor,
        layout: &WindowLayout,
        stage: &Stage,
        prefix: &str,
    ) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let (nw, t) = (layout.num_windows, layout.tokens_per_window);
        let (heads, hd) = (stage.heads, stage.dim / stage.heads);
        let windows = gather_tokens(x, &layout.gather)?.reshape((b * nw, t, c))?;
        let qkv = linear(&windows, p, &format!("{prefix}.qkv"))?
            .reshape((b * nw, t, 3, heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut scores = (q.matmul(&k.transpose(D::Minus2, D::Minus1)?.contiguous()?)? * scale)?;
        if let Some(bias) = &layout.bias {
            scores = scores
                .reshape((b, nw, heads, t, t))?
                .broadcast_add(bias)?
                .reshape((b * nw, heads, t, t))?;
        }
        let attn = softmax_last(&scores)?;
        let out = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .reshape((b, nw * t, c))?;
        let out = gather_tokens(&out, &layout.scatter)?;
        debug_assert_eq!(out.dims(), &[b, n, c]);
        linear(&out, p, &format!("{prefix}.proj"))
    }

    /// `h_pred`: one voxel block per final token, `(B, N_out, P_eff³)`.
    pub fn predict_pixels(&self, p: &Params, out: &EncoderOutput) -> Result<Tensor> {
        let pe = self.cfg.effective_patch();
        match self.cfg.decoder_kind {
            DecoderKind::OneLayer => linear(&out.patch_embeddings, p, "pred.fc"),
            DecoderKind::MultiLayer => {
                let mut x = out.patch_embeddings.clone();
                let mut grid = self.cfg.final_grid();
                for i in 0..multi_layer_widths(&self.cfg).len() {
                    x = gelu(&upsample(&x, p, &format!("pred.up{i}"), grid)?)?;
                    grid *= 2;
                }
                let image = linear(&x, p, "pred.out")?.squeeze(2)?;
                patchify_tensor(&image, self.cfg.view_size, pe)
            }
        }
    }

    /// Reassembles `(B, N_out, P_eff³)` blocks into `(B, S³)` raster voxels.
    pub fn blocks_to_views(&self, blocks: &Tensor) -> Result<Tensor> {
        unpatchify_tensor(blocks, self.cfg.view_size, self.cfg.effective_patch())
    }

    /// Cuts `(B, S³)` raster voxels into final-token blocks `(B, N_out, P_eff³)`.
    pub fn views_to_blocks(&self, views: &Tensor) -> Result<Tensor> {
        patchify_tensor(views, self.cfg.view_size, self.cfg.effective_patch())
    }
}

/// `h_patch` and `h_cls`: raw logits `(B, N_out, K)` and `(B, K)`.
pub fn project_heads(p: &Params, out: &EncoderOutput) -> Result<(Tensor, Tensor)> {
    Ok((
        linear(&out.patch_embeddings, p, "head.patch")?,
        linear(&out.global_embedding, p, "head.cls")?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn desk_views(b: usize, dtype: DType) -> Tensor {
        let s = EncoderConfig::desk().view_size;
        let data: Vec<f64> = (0..b * s.pow(3)).map(|i| ((i * 7919) % 1000) as f64 / 1000.0).collect();
        Tensor::from_vec(data, (b, s.pow(3)), &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
    }

    #[test]
    fn shapes_on_desk_preset() {
        let cfg = EncoderConfig::desk();
        let p = init_student_params(&cfg, 0, DType::F32).unwrap();
        let enc = Encoder::new(&cfg, DType::F32).unwrap();
        let out = enc.forward(&p, &desk_views(2, DType::F32), None).unwrap();
        assert_eq!(out.patch_embeddings.dims(), &[2, 64, 32]);
        assert_eq!(out.global_embedding.dims(), &[2, 32]);
        assert_eq!(out.stage_features[0].dims(), &[2, 512, 32]);
        let (pl, cl) = project_heads(&p, &out).unwrap();
        assert_eq!(pl.dims(), &[2, 64, 256]);
        assert_eq!(cl.dims(), &[2, 256]);
        let blocks = enc.predict_pixels(&p, &out).unwrap();
        assert_eq!(blocks.dims(), &[2, 64, 512]);
        assert_eq!(enc.blocks_to_views(&blocks).unwrap().dims(), &[2, 32768]);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = EncoderConfig::desk();
        let p = init_student_params(&cfg, 3, DType::F32).unwrap();
        let enc = Encoder::new(&cfg, DType::F32).unwrap();
        let x = desk_views(1, DType::F32);
        let a = enc.forward(&p, &x, None).unwrap().patch_embeddings.flatten_all().unwrap();
        let b = enc.forward(&p, &x, None).unwrap().patch_embeddings.flatten_all().unwrap();
        assert_eq!(a.to_vec1::<f32>().unwrap(), b.to_vec1::<f32>().unwrap());
    }

    #[test]
    fn desk_preset_fits_the_parameter_budget() {
        let p = init_student_params(&EncoderConfig::desk(), 0, DType::F32).unwrap();
        assert!(p.num_scalars() <= 100_000, "{} parameters", p.num_scalars());
    }

    #[test]
    fn one_layer_head_size_and_ordering() {
        for cfg in [EncoderConfig::desk(), EncoderConfig::full_scale()] {
            let e = cfg.embed_dim;
            let v = cfg.effective_patch().pow(3);
            assert_eq!(pixel_head_param_count(&cfg).unwrap(), e * v + v);
            let ml = EncoderConfig {
                decoder_kind: DecoderKind::MultiLayer,
                ..cfg.clone()
            };
            assert!(pixel_head_param_count(&cfg).unwrap() < pixel_head_param_count(&ml).unwrap());
        }
    }

    #[test]
    fn multi_layer_decoder_returns_blocks() {
        let cfg = EncoderConfig {
            decoder_kind: DecoderKind::MultiLayer,
            ..EncoderConfig::desk()
        };
        let p = init_student_params(&cfg, 0, DType::F32).unwrap();
        let enc = Encoder::new(&cfg, DType::F32).unwrap();
        let out = enc.forward(&p, &desk_views(1, DType::F32), None).unwrap();
        assert_eq!(enc.predict_pixels(&p, &out).unwrap().dims(), &[1, 64, 512]);
    }

    #[test]
    fn zero_heads_give_zero_outputs() {
        let cfg = EncoderConfig::desk();
        let mut p = init_student_params(&cfg, 0, DType::F64).unwrap();
        for name in ["pred.fc.w", "pred.fc.b", "head.patch.w", "head.patch.b", "head.cls.w", "head.cls.b"] {
            let z = p.get(name).unwrap().zeros_like().unwrap();
            p.insert(name, z);
        }
        let enc = Encoder::new(&cfg, DType::F64).unwrap();
        let out = enc.forward(&p, &desk_views(1, DType::F64), None).unwrap();
        let blocks = enc.predict_pixels(&p, &out).unwrap();
        assert!(blocks.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|&x| x == 0.0));
        let (pl, cl) = project_heads(&p, &out).unwrap();
        assert!(pl.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|&x| x == 0.0));
        assert!(cl.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn heads_are_affine_in_the_embedding() {
        let cfg = EncoderConfig::desk();
        let p = init_student_params(&cfg, 1, DType::F64).unwrap();
        let enc = Encoder::new(&cfg, DType::F64).unwrap();
        let out = enc.forward(&p, &desk_views(1, DType::F64), None).unwrap();
        let (_, base) = project_heads(&p, &out).unwrap();
        let c = 0.37;
        let shifted = EncoderOutput {
            global_embedding: (out.global_embedding.clone() + c).unwrap(),
            ..out.clone()
        };
        let (_, moved) = project_heads(&p, &shifted).unwrap();
        // h(e + c·1) - h(e) = c · 1ᵀW
        let w = p.get("head.cls.w").unwrap();
        let expect = (w.sum(0).unwrap() * c).unwrap().to_vec1::<f64>().unwrap();
        let diff = (moved - base).unwrap().squeeze(0).unwrap().to_vec1::<f64>().unwrap();
        for (a, b) in diff.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn window_attention_is_equivariant_within_a_window() {
        // swap two tokens of the same first-stage window: the block output
        // rows swap and nothing else changes
        let cfg = EncoderConfig::desk();
        let p = init_student_params(&cfg, 5, DType::F64).unwrap();
        let enc = Encoder::new(&cfg, DType::F64).unwrap();
        let x = enc.embed(&p, &desk_views(1, DType::F64), None).unwrap();
        let (i, j) = (0usize, 8 * 8 + 8 + 1); // raster (0,0,0) and (1,1,1), both in window 0
        let mut perm: Vec<usize> = (0..512).collect();
        perm.swap(i, j);
        let idx = crate::nn::index_tensor(&perm).unwrap();
        let xp = x.index_select(&idx, 1).unwrap();
        let y = enc.block(&p, &x, 0, 0).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        let yp = enc.block(&p, &xp, 0, 0).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        for r in 0..512 {
            let src = perm[r];
            for (a, b) in yp[r].iter().zip(&y[src]) {
                assert!((a - b).abs() < 1e-12, "row {r}");
            }
        }
        assert!(y[i].iter().zip(&y[j]).any(|(a, b)| (a - b).abs() > 1e-6));
    }

    #[test]
    fn masked_embedding_uses_mask_token_plus_position() {
        let cfg = EncoderConfig::desk();
        let p = init_student_params(&cfg, 2, DType::F64).unwrap();
        let enc = Encoder::new(&cfg, DType::F64).unwrap();
        let ones = Tensor::ones((1, 512), DType::F64, &Device::Cpu).unwrap();
        let x = enc.embed(&p, &desk_views(1, DType::F64), Some(&ones)).unwrap();
        let expect = p
            .get("enc.pos_embed")
            .unwrap()
            .broadcast_add(p.get("mask_token").unwrap())
            .unwrap();
        let diff = (x.squeeze(0).unwrap() - expect).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(diff.to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn geometry_mismatch_is_reported() {
        let cfg = EncoderConfig::desk();
        let p = init_student_params(&cfg, 0, DType::F32).unwrap();
        let enc = Encoder::new(&cfg, DType::F32).unwrap();
        let bad = Tensor::zeros((1, 100), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(enc.forward(&p, &bad, None), Err(Error::Geometry(_))));
        let bad_tokens = Tensor::zeros((1, 100, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(enc.encode(&p, &bad_tokens), Err(Error::Geometry(_))));
    }
}
