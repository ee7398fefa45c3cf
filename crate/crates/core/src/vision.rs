//! Dual-path visual encoder.
//!
//! The original stream is an unmodified pre-norm vision transformer. Beside
//! it runs a local-aware stream that, at every layer, adds the output
//! projection of value-value attention (`softmax(V·Vᵀ·scale)·V`, with `V`
//! taken from the original stream) to its own running residual. Patch
//! features for pixel-level scoring come from the local stream; the global
//! feature comes from the original stream's class token.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::multi_head_attention;
use crate::error::{Error, Result};
use crate::fusion::maps::STAGE_COUNT;
use crate::image_io::PixelImage;
use crate::tensor::{layer_norm_affine, Mat};
use crate::transformer::{AttentionLayerParams, TransformerBlock, LN_EPS};
use crate::weights::{load_tensor_dir, save_tensor_dir, take};

pub use crate::attention::scaled_attention;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisionConfig {
    pub image_side: usize,
    pub patch_size: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    /// Width `C` of the projected global feature.
    pub output_dim: usize,
    /// 1-based layer indices whose local-stream patch rows form the stages.
    pub stage_layers: [usize; STAGE_COUNT],
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub init_std: f64,
}

impl VisionConfig {
    /// 4 layers, width 16, 4 heads, 4-pixel patches on 32×32 inputs.
    pub fn tiny() -> Self {
        Self {
            image_side: 32,
            patch_size: 4,
            width: 16,
            layers: 4,
            heads: 4,
            output_dim: 16,
            stage_layers: [1, 2, 3, 4],
            mean: [0.5; 3],
            std: [0.5; 3],
            init_std: 0.02,
        }
    }

    /// Layout of a ViT-L/14 backbone at 336 px for plug-in weights.
    pub fn vit_l14_336() -> Self {
        Self {
            image_side: 336,
            patch_size: 14,
            width: 1024,
            layers: 24,
            heads: 16,
            output_dim: 768,
            stage_layers: [6, 12, 18, 24],
            mean: [0.481_454_66, 0.457_827_5, 0.408_210_73],
            std: [0.268_629_54, 0.261_302_58, 0.275_777_11],
            init_std: 0.02,
        }
    }

    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch_size
    }

    pub fn patch_count(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_side.is_multiple_of(self.patch_size) {
            return Err(Error::InvalidConfig(format!(
                "image side {} is not a multiple of patch size {}",
                self.image_side, self.patch_size
            )));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!("width {} not divisible by {} heads", self.width, self.heads)));
        }
        let mut prev = 0;
        for &l in &self.stage_layers {
            if l <= prev || l > self.layers {
                return Err(Error::InvalidConfig(format!(
                    "stage layers {:?} must be strictly increasing within 1..={}",
                    self.stage_layers, self.layers
                )));
            }
            prev = l;
        }
        if self.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidConfig("channel std must be positive".into()));
        }
        Ok(())
    }
}

/// `(T+1) × width` tokens: row 0 is the class token, rows `1..=T` patches.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence(pub Mat);

impl TokenSequence {
    pub fn patch_count(&self) -> usize {
        self.0.rows() - 1
    }

    pub fn class_token(&self) -> &[f64] {
        self.0.row(0)
    }

    pub fn patches(&self) -> Mat {
        self.0.slice_rows(1, self.0.rows())
    }
}

/// Which stream supplies stage patch features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchSource {
    #[default]
    Local,
    Original,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageFeatures {
    /// `(H_i·W_i) × C_i` patch features, row-major over the grid.
    pub features: Mat,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeaturePyramid {
    pub stages: Vec<StageFeatures>,
    /// Projected class token `I_G`, length `C`.
    pub global: Vec<f64>,
}

/// One dual-path layer. The original stream advances through the standard
/// block; the local stream adds `Project(Attention(V, V, V))` with `V`
/// computed from the original stream's normalized input.
pub fn vv_layer(
    prev_original: &TokenSequence,
    prev_local: &TokenSequence,
    block: &TransformerBlock,
) -> Result<(TokenSequence, TokenSequence)> {
    let w = block.width();
    if prev_original.0.shape() != prev_local.0.shape() || prev_original.0.cols() != w {
        return Err(Error::ShapeMismatch(format!(
            "streams {:?} / {:?} for block width {w}",
            prev_original.0.shape(),
            prev_local.0.shape()
        )));
    }
    block.attn.validate()?;
    let (q, k, v) = block.attn.qkv_plain(&block.ln1(&prev_original.0));
    let original = block.finish_plain(&prev_original.0, &q, &k, &v);
    let local = prev_local.0.add(&value_value_update(&v, &block.attn)?)?;
    Ok((TokenSequence(original), TokenSequence(local)))
}

/// `Project(Attention(V, V, V))` for one layer.
pub fn value_value_update(v: &Mat, attn: &AttentionLayerParams) -> Result<Mat> {
    let attended = multi_head_attention(v, v, v, attn.heads)?;
    Ok(attn.project_plain(&attended))
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisionEncoder {
    pub config: VisionConfig,
    /// `3p² × width`, rows ordered channel, then patch row, then patch column.
    pub patch_embed: Mat,
    pub class_embedding: Mat,
    pub pos_embedding: Mat,
    pub ln_pre_gain: Mat,
    pub ln_pre_bias: Mat,
    pub blocks: Vec<TransformerBlock>,
    pub ln_post_gain: Mat,
    pub ln_post_bias: Mat,
    pub proj: Mat,
}

impl VisionEncoder {
    /// Seeded Gaussian initialization (`config.init_std`).
    pub fn random(config: VisionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, std) = (config.width, config.init_std);
        Ok(Self {
            patch_embed: Mat::randn(config.patch_dim(), w, std, &mut rng),
            class_embedding: Mat::randn(1, w, std, &mut rng),
            pos_embedding: Mat::randn(config.patch_count() + 1, w, std, &mut rng),
            ln_pre_gain: Mat::filled(1, w, 1.0),
            ln_pre_bias: Mat::zeros(1, w),
            blocks: (0..config.layers).map(|_| TransformerBlock::random(w, config.heads, std, &mut rng)).collect(),
            ln_post_gain: Mat::filled(1, w, 1.0),
            ln_post_bias: Mat::zeros(1, w),
            proj: Mat::randn(w, config.output_dim, std, &mut rng),
            config,
        })
    }

    /// Class token, patch embeddings and positions after the input norm.
    pub fn embed(&self, image: &PixelImage) -> Result<TokenSequence> {
        let cfg = &self.config;
        if image.height() != cfg.image_side || image.width() != cfg.image_side {
            return Err(Error::ShapeMismatch(format!(
                "image is {}x{}, encoder expects {}x{}",
                image.height(),
                image.width(),
                cfg.image_side,
                cfg.image_side
            )));
        }
        let patches = patchify(image, cfg.patch_size);
        let embedded = patches.matmul(&self.patch_embed)?;
        let tokens = Mat::concat_rows(&[&self.class_embedding, &embedded])?.add(&self.pos_embedding)?;
        Ok(TokenSequence(layer_norm_affine(&tokens, self.ln_pre_gain.as_slice(), self.ln_pre_bias.as_slice(), LN_EPS)))
    }

    /// Reference forward of the unmodified encoder: final original-stream tokens.
    pub fn forward_plain(&self, image: &PixelImage) -> Result<TokenSequence> {
        let mut x = self.embed(image)?.0;
        for block in &self.blocks {
            x = block.forward_plain(&x);
        }
        Ok(TokenSequence(x))
    }

    pub fn encode_image(&self, image: &PixelImage) -> Result<PatchFeaturePyramid> {
        self.encode_image_from(image, PatchSource::Local)
    }

    pub fn encode_image_from(&self, image: &PixelImage, source: PatchSource) -> Result<PatchFeaturePyramid> {
        let side = self.config.grid_side();
        let mut original = self.embed(image)?;
        let mut local = original.clone();
        let mut stages = Vec::with_capacity(STAGE_COUNT);
        for (i, block) in self.blocks.iter().enumerate() {
            let (o, l) = vv_layer(&original, &local, block)?;
            original = o;
            local = l;
            if self.config.stage_layers.contains(&(i + 1)) {
                let stream = match source {
                    PatchSource::Local => &local,
                    PatchSource::Original => &original,
                };
                stages.push(StageFeatures { features: stream.patches(), height: side, width: side });
            }
        }
        let cls = Mat::row_vector(original.class_token());
        let normed = layer_norm_affine(&cls, self.ln_post_gain.as_slice(), self.ln_post_bias.as_slice(), LN_EPS);
        let global = normed.matmul(&self.proj)?.into_vec();
        Ok(PatchFeaturePyramid { stages, global })
    }

    pub fn tensors(&self) -> BTreeMap<String, Mat> {
        let mut out = BTreeMap::new();
        out.insert("patch_embed".into(), self.patch_embed.clone());
        out.insert("class_embedding".into(), self.class_embedding.clone());
        out.insert("pos_embedding".into(), self.pos_embedding.clone());
        out.insert("ln_pre_gain".into(), self.ln_pre_gain.clone());
        out.insert("ln_pre_bias".into(), self.ln_pre_bias.clone());
        out.insert("ln_post_gain".into(), self.ln_post_gain.clone());
        out.insert("ln_post_bias".into(), self.ln_post_bias.clone());
        out.insert("proj".into(), self.proj.clone());
        for (i, b) in self.blocks.iter().enumerate() {
            b.export(&format!("blocks.{i:02}"), &mut out);
        }
        out
    }

    pub fn from_tensors(config: VisionConfig, mut tensors: BTreeMap<String, Mat>) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let t = &mut tensors;
        let encoder = Self {
            patch_embed: take(t, "patch_embed", config.patch_dim(), w)?,
            class_embedding: take(t, "class_embedding", 1, w)?,
            pos_embedding: take(t, "pos_embedding", config.patch_count() + 1, w)?,
            ln_pre_gain: take(t, "ln_pre_gain", 1, w)?,
            ln_pre_bias: take(t, "ln_pre_bias", 1, w)?,
            ln_post_gain: take(t, "ln_post_gain", 1, w)?,
            ln_post_bias: take(t, "ln_post_bias", 1, w)?,
            proj: take(t, "proj", w, config.output_dim)?,
            blocks: (0..config.layers)
                .map(|i| TransformerBlock::import(&format!("blocks.{i:02}"), w, config.heads, t))
                .collect::<Result<_>>()?,
            config,
        };
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::WeightLoadFailure(format!("unexpected tensor `{extra}`")));
        }
        Ok(encoder)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_tensor_dir(dir, &self.config, &self.tensors())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (config, tensors) = load_tensor_dir::<VisionConfig>(dir)?;
        Self::from_tensors(config, tensors)
    }
}

/// `T × 3p²` patch matrix, patches in row-major grid order.
pub fn patchify(image: &PixelImage, patch: usize) -> Mat {
    let side_h = image.height() / patch;
    let side_w = image.width() / patch;
    let mut out = Mat::zeros(side_h * side_w, 3 * patch * patch);
    for py in 0..side_h {
        for px in 0..side_w {
            let row = out.row_mut(py * side_w + px);
            let mut i = 0;
            for c in 0..3 {
                for dy in 0..patch {
                    for dx in 0..patch {
                        row[i] = image.get(c, py * patch + dy, px * patch + dx);
                        i += 1;
                    }
                }
            }
        }
    }
    out
}
