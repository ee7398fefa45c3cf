//! Text encoder interface and a small frozen transformer implementation.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Mat;
use crate::transformer::{TransformerBlock, LN_EPS};
use crate::weights::{load_tensor_dir, save_tensor_dir, take};

/// Maps token-embedding sequences (and raw text) to `C`-dimensional features.
///
/// `encode_tokens_var` must be differentiable with respect to the input
/// embeddings so learnable prompt prefixes can be trained through a frozen
/// encoder.
pub trait TextEncoder: Send + Sync {
    /// Output feature width `C`.
    fn dim(&self) -> usize;
    /// Token embedding width.
    fn token_dim(&self) -> usize;
    /// Longest accepted embedding sequence (special tokens excluded).
    fn max_tokens(&self) -> usize;
    fn tokenize(&self, text: &str) -> Vec<usize>;
    /// `len × token_dim` embeddings for token ids.
    fn embed_ids(&self, ids: &[usize]) -> Mat;
    /// Encodes an `L × token_dim` sequence to a `1 × C` row on the tape.
    fn encode_tokens_var(&self, g: &mut Graph, tokens: Var) -> Var;

    fn encode_tokens(&self, tokens: &Mat) -> Result<Vec<f64>> {
        if tokens.cols() != self.token_dim() {
            return Err(Error::EncoderFailure(format!(
                "token width {} differs from encoder width {}",
                tokens.cols(),
                self.token_dim()
            )));
        }
        if tokens.rows() > self.max_tokens() {
            return Err(Error::EncoderFailure(format!(
                "{} tokens exceed the encoder context of {}",
                tokens.rows(),
                self.max_tokens()
            )));
        }
        let mut g = Graph::new();
        let t = g.constant(tokens.clone());
        let out = self.encode_tokens_var(&mut g, t);
        Ok(g.value(out).as_slice().to_vec())
    }

    /// Tokenizes (truncating to the context) then encodes.
    fn encode_text(&self, text: &str) -> Result<Vec<f64>> {
        let mut ids = self.tokenize(text);
        ids.truncate(self.max_tokens());
        self.encode_tokens(&self.embed_ids(&ids))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub token_dim: usize,
    pub context: usize,
    pub layers: usize,
    pub heads: usize,
    pub output_dim: usize,
    pub init_std: f64,
}

impl TextEncoderConfig {
    pub fn tiny() -> Self {
        Self { vocab_size: 4096, token_dim: 16, context: 77, layers: 2, heads: 2, output_dim: 16, init_std: 0.02 }
    }
}

const SOT: usize = 0;
const EOT: usize = 1;
const RESERVED: usize = 2;

/// Word-level hashed-vocabulary transformer. Sequences are wrapped in
/// start/end tokens, positionally embedded, run through the blocks, then
/// mean-pooled, layer-normalized and projected to `C`.
#[derive(Clone, Debug, PartialEq)]
pub struct TinyTextEncoder {
    pub config: TextEncoderConfig,
    pub token_embedding: Mat,
    pub pos_embedding: Mat,
    pub blocks: Vec<TransformerBlock>,
    pub ln_final_gain: Mat,
    pub ln_final_bias: Mat,
    pub proj: Mat,
}

impl TinyTextEncoder {
    pub fn random(config: TextEncoderConfig, seed: u64) -> Result<Self> {
        if config.vocab_size <= RESERVED || config.context < 3 || config.heads == 0 {
            return Err(Error::InvalidConfig(format!("bad text encoder config {config:?}")));
        }
        if !config.token_dim.is_multiple_of(config.heads) {
            return Err(Error::InvalidConfig("token_dim not divisible by heads".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, std) = (config.token_dim, config.init_std);
        Ok(Self {
            token_embedding: Mat::randn(config.vocab_size, d, std, &mut rng),
            pos_embedding: Mat::randn(config.context, d, std / 2.0, &mut rng),
            blocks: (0..config.layers).map(|_| TransformerBlock::random(d, config.heads, std, &mut rng)).collect(),
            ln_final_gain: Mat::filled(1, d, 1.0),
            ln_final_bias: Mat::zeros(1, d),
            proj: Mat::randn(d, config.output_dim, std, &mut rng),
            config,
        })
    }

    pub fn tensors(&self) -> BTreeMap<String, Mat> {
        let mut out = BTreeMap::new();
        out.insert("token_embedding".into(), self.token_embedding.clone());
        out.insert("pos_embedding".into(), self.pos_embedding.clone());
        out.insert("ln_final_gain".into(), self.ln_final_gain.clone());
        out.insert("ln_final_bias".into(), self.ln_final_bias.clone());
        out.insert("proj".into(), self.proj.clone());
        for (i, b) in self.blocks.iter().enumerate() {
            b.export(&format!("blocks.{i:02}"), &mut out);
        }
        out
    }

    pub fn from_tensors(config: TextEncoderConfig, mut tensors: BTreeMap<String, Mat>) -> Result<Self> {
        let d = config.token_dim;
        let t = &mut tensors;
        let enc = Self {
            token_embedding: take(t, "token_embedding", config.vocab_size, d)?,
            pos_embedding: take(t, "pos_embedding", config.context, d)?,
            ln_final_gain: take(t, "ln_final_gain", 1, d)?,
            ln_final_bias: take(t, "ln_final_bias", 1, d)?,
            proj: take(t, "proj", d, config.output_dim)?,
            blocks: (0..config.layers)
                .map(|i| TransformerBlock::import(&format!("blocks.{i:02}"), d, config.heads, t))
                .collect::<Result<_>>()?,
            config,
        };
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::WeightLoadFailure(format!("unexpected tensor `{extra}`")));
        }
        Ok(enc)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_tensor_dir(dir, &self.config, &self.tensors())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (config, tensors) = load_tensor_dir::<TextEncoderConfig>(dir)?;
        Self::from_tensors(config, tensors)
    }
}

/// Lower-cased alphanumeric runs.
pub fn split_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_lowercase).collect()
}

impl TextEncoder for TinyTextEncoder {
    fn dim(&self) -> usize {
        self.config.output_dim
    }

    fn token_dim(&self) -> usize {
        self.config.token_dim
    }

    fn max_tokens(&self) -> usize {
        self.config.context - 2
    }

    fn tokenize(&self, text: &str) -> Vec<usize> {
        let buckets = (self.config.vocab_size - RESERVED) as u64;
        split_words(text)
            .iter()
            .map(|w| {
                let digest = Sha256::digest(w.as_bytes());
                let h = u64::from_le_bytes(digest[..8].try_into().unwrap());
                RESERVED + (h % buckets) as usize
            })
            .collect()
    }

    fn embed_ids(&self, ids: &[usize]) -> Mat {
        let rows: Vec<&[f64]> = ids.iter().map(|&i| self.token_embedding.row(i)).collect();
        let mut out = Mat::zeros(ids.len(), self.config.token_dim);
        for (r, src) in rows.into_iter().enumerate() {
            out.row_mut(r).copy_from_slice(src);
        }
        out
    }

    fn encode_tokens_var(&self, g: &mut Graph, tokens: Var) -> Var {
        let len = g.shape(tokens).0;
        let sot = g.constant(self.embed_ids(&[SOT]));
        let eot = g.constant(self.embed_ids(&[EOT]));
        let seq = g.concat_rows(&[sot, tokens, eot]);
        let pos = g.constant(self.pos_embedding.slice_rows(0, len + 2));
        let mut x = g.add(seq, pos);
        for block in &self.blocks {
            x = block.forward_var(g, x);
        }
        let pool = g.constant(Mat::filled(1, len + 2, 1.0 / (len + 2) as f64));
        let pooled = g.matmul(pool, x);
        let gain = g.constant(self.ln_final_gain.clone());
        let bias = g.constant(self.ln_final_bias.clone());
        let normed = g.layer_norm_affine(pooled, gain, bias, LN_EPS);
        let proj = g.constant(self.proj.clone());
        g.matmul(normed, proj)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoder() -> TinyTextEncoder {
        TinyTextEncoder::random(TextEncoderConfig::tiny(), 11).unwrap()
    }

    #[test]
    fn tokenizer_is_case_insensitive_and_stable() {
        let e = encoder();
        assert_eq!(e.tokenize("Metal Nut"), e.tokenize("metal   nut"));
        assert_eq!(e.tokenize("metal nut").len(), 2);
        assert!(e.tokenize("a b c").iter().all(|&id| (RESERVED..4096).contains(&id)));
    }

    #[test]
    fn constant_output_dim_and_determinism() {
        let e = encoder();
        let a = e.encode_text("a scratch on the surface").unwrap();
        let b = e.encode_text("a scratch on the surface").unwrap();
        assert_eq!(a.len(), 16);
        assert_eq!(a, b);
        assert_eq!(e.encode_text("").unwrap().len(), 16);
    }

    #[test]
    fn rejects_wrong_token_width() {
        let e = encoder();
        assert!(matches!(e.encode_tokens(&Mat::zeros(3, 5)), Err(Error::EncoderFailure(_))));
    }

    #[test]
    fn long_text_is_truncated() {
        let e = encoder();
        let long = "word ".repeat(200);
        assert_eq!(e.encode_text(&long).unwrap().len(), 16);
    }

    #[test]
    fn weights_round_trip() {
        let e = encoder();
        let dir = tempfile::tempdir().unwrap();
        e.save(dir.path()).unwrap();
        assert_eq!(TinyTextEncoder::load(dir.path()).unwrap(), e);
    }
}
