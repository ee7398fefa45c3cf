//! Learnable normal/abnormal prompts and the knowledge-driven hinge loss.
//!
//! A normal prompt is `[N_1]…[N_K][state word][class]` and an abnormal prompt
//! `[A_1]…[A_K][state word][class]`. The two prefix sets are shared across
//! classes; one prompt variant is assembled per state word.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::tensor::{euclidean, l2_norm, Mat};
use crate::text::TextEncoder;

pub const NORMAL_PREFIX: &str = "prompt.normal_prefix";
pub const ABNORMAL_PREFIX: &str = "prompt.abnormal_prefix";
pub const PREFIX_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    /// Learnable prefix length `K`.
    pub prefix_len: usize,
    pub normal_words: Vec<String>,
    pub abnormal_words: Vec<String>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            prefix_len: 12,
            normal_words: vec!["normal".into(), "perfect".into()],
            abnormal_words: vec!["abnormal".into(), "defective".into()],
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prefix_len == 0 {
            return Err(Error::InvalidConfig("prompt prefix length must be at least 1".into()));
        }
        if self.normal_words.is_empty() || self.abnormal_words.is_empty() {
            return Err(Error::InvalidConfig("state word lists must be non-empty".into()));
        }
        if self.normal_words.iter().any(|w| self.abnormal_words.contains(w)) {
            return Err(Error::InvalidConfig("normal and abnormal state words overlap".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum State {
    Normal,
    Abnormal,
}

impl State {
    fn prefix_name(self) -> &'static str {
        match self {
            State::Normal => NORMAL_PREFIX,
            State::Abnormal => ABNORMAL_PREFIX,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LearnablePromptBank {
    pub config: PromptConfig,
    /// `K × d_tok`.
    pub normal_prefix: Mat,
    /// `K × d_tok`, independent of `normal_prefix`.
    pub abnormal_prefix: Mat,
    pub class_names: Vec<String>,
}

/// Draws both prefixes i.i.d. from `N(0, 0.02²)` with the default state words.
pub fn init_prompt_bank(prefix_len: usize, token_dim: usize, seed: u64) -> Result<LearnablePromptBank> {
    let config = PromptConfig { prefix_len, ..PromptConfig::default() };
    LearnablePromptBank::new(config, token_dim, seed)
}

impl LearnablePromptBank {
    pub fn new(config: PromptConfig, token_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if token_dim == 0 {
            return Err(Error::InvalidConfig("token dimension must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal_prefix = Mat::randn(config.prefix_len, token_dim, PREFIX_INIT_STD, &mut rng);
        let abnormal_prefix = Mat::randn(config.prefix_len, token_dim, PREFIX_INIT_STD, &mut rng);
        Ok(Self { config, normal_prefix, abnormal_prefix, class_names: Vec::new() })
    }

    pub fn write_params(&self, store: &mut ParamStore) {
        store.insert(NORMAL_PREFIX, self.normal_prefix.clone());
        store.insert(ABNORMAL_PREFIX, self.abnormal_prefix.clone());
    }

    pub fn from_params(config: PromptConfig, store: &ParamStore) -> Result<Self> {
        let get = |name: &str| {
            store.get(name).cloned().ok_or_else(|| Error::WeightLoadFailure(format!("missing parameter `{name}`")))
        };
        Ok(Self {
            normal_prefix: get(NORMAL_PREFIX)?,
            abnormal_prefix: get(ABNORMAL_PREFIX)?,
            config,
            class_names: Vec::new(),
        })
    }

    fn words(&self, state: State) -> &[String] {
        match state {
            State::Normal => &self.config.normal_words,
            State::Abnormal => &self.config.abnormal_words,
        }
    }

    fn prefix(&self, state: State) -> &Mat {
        match state {
            State::Normal => &self.normal_prefix,
            State::Abnormal => &self.abnormal_prefix,
        }
    }
}

fn checked_class(class: &str) -> Result<&str> {
    let trimmed = class.trim();
    if trimmed.is_empty() {
        return Err(Error::EmptyClassName);
    }
    Ok(trimmed)
}

/// Token-embedding sequences for every normal and abnormal variant of
/// `class`: prefix rows, then the state word's tokens, then the class tokens.
pub fn assemble_prompts(
    bank: &LearnablePromptBank,
    class: &str,
    encoder: &dyn TextEncoder,
) -> Result<(Vec<Mat>, Vec<Mat>)> {
    let class = checked_class(class)?;
    let class_emb = encoder.embed_ids(&encoder.tokenize(class));
    let build = |state: State| -> Result<Vec<Mat>> {
        bank.words(state)
            .iter()
            .map(|w| {
                let word_emb = encoder.embed_ids(&encoder.tokenize(w));
                Mat::concat_rows(&[bank.prefix(state), &word_emb, &class_emb])
            })
            .collect()
    };
    Ok((build(State::Normal)?, build(State::Abnormal)?))
}

/// Encoded prompt features for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct TextFeatures {
    /// Mean of the encoded normal variants (`w̄^n`).
    pub normal_mean: Vec<f64>,
    /// Mean of the encoded abnormal variants (`w̄^a`).
    pub abnormal_mean: Vec<f64>,
    /// `F_n`, the unit-norm normal feature.
    pub normal: Vec<f64>,
    /// `F_a`, the unit-norm abnormal feature.
    pub abnormal: Vec<f64>,
}

impl TextFeatures {
    pub fn from_means(normal_mean: Vec<f64>, abnormal_mean: Vec<f64>) -> Result<Self> {
        let unit = |v: &[f64], name: &'static str| -> Result<Vec<f64>> {
            let n = l2_norm(v);
            if n == 0.0 {
                return Err(Error::ZeroNormVector(name));
            }
            Ok(v.iter().map(|x| x / n).collect())
        };
        Ok(Self {
            normal: unit(&normal_mean, "normal text feature")?,
            abnormal: unit(&abnormal_mean, "abnormal text feature")?,
            normal_mean,
            abnormal_mean,
        })
    }

    /// `F_text = [F_n; F_a]` (row 0 normal, row 1 abnormal).
    pub fn text_matrix(&self) -> Mat {
        Mat::from_rows(&[self.normal.clone(), self.abnormal.clone()]).expect("equal widths")
    }
}

pub fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    let mut out = vec![0.0; rows.first().map_or(0, Vec::len)];
    for r in rows {
        for (o, x) in out.iter_mut().zip(r) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|o| *o /= n);
    out
}

pub fn encode_prompt_bank(bank: &LearnablePromptBank, class: &str, encoder: &dyn TextEncoder) -> Result<TextFeatures> {
    let (normal, abnormal) = assemble_prompts(bank, class, encoder)?;
    let encode_all =
        |seqs: &[Mat]| -> Result<Vec<Vec<f64>>> { seqs.iter().map(|s| encoder.encode_tokens(s)).collect() };
    TextFeatures::from_means(mean_rows(&encode_all(&normal)?), mean_rows(&encode_all(&abnormal)?))
}

/// Tape-side prompt features: `(w̄^n, w̄^a, F_text)` with `F_text` the
/// row-normalized `2 × C` stack.
#[derive(Clone, Copy, Debug)]
pub struct TextFeatureVars {
    pub normal_mean: Var,
    pub abnormal_mean: Var,
    pub text: Var,
}

pub fn encode_prompts_var(
    g: &mut Graph,
    binder: &mut Binder<'_>,
    config: &PromptConfig,
    class: &str,
    encoder: &dyn TextEncoder,
) -> Result<TextFeatureVars> {
    let class = checked_class(class)?;
    let class_ids = encoder.tokenize(class);
    let mut means = Vec::with_capacity(2);
    for state in [State::Normal, State::Abnormal] {
        let prefix = binder.get(g, state.prefix_name());
        let words = match state {
            State::Normal => &config.normal_words,
            State::Abnormal => &config.abnormal_words,
        };
        let mut encoded = Vec::with_capacity(words.len());
        for w in words {
            let mut ids = encoder.tokenize(w);
            ids.extend_from_slice(&class_ids);
            let suffix = g.constant(encoder.embed_ids(&ids));
            let seq = g.concat_rows(&[prefix, suffix]);
            if g.shape(seq).0 > encoder.max_tokens() {
                return Err(Error::EncoderFailure(format!("prompt for `{class}` exceeds the encoder context")));
            }
            encoded.push(encoder.encode_tokens_var(g, seq));
        }
        let stacked = g.concat_rows(&encoded);
        let pool = g.constant(Mat::filled(1, encoded.len(), 1.0 / encoded.len() as f64));
        means.push(g.matmul(pool, stacked));
    }
    let stacked = g.concat_rows(&means);
    let text = g.l2_normalize_rows(stacked);
    Ok(TextFeatureVars { normal_mean: means[0], abnormal_mean: means[1], text })
}

fn unit(v: &[f64], name: &'static str) -> Result<Vec<f64>> {
    let n = l2_norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroNormVector(name));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// `max(0, d(k̂, â) − d(k̂, n̂))` over L2-normalized inputs.
pub fn kd_loss(knowledge: &[f64], normal: &[f64], abnormal: &[f64]) -> Result<f64> {
    if knowledge.len() != normal.len() || knowledge.len() != abnormal.len() {
        return Err(Error::ShapeMismatch("kd_loss vectors differ in length".into()));
    }
    let k = unit(knowledge, "knowledge mean")?;
    let n = unit(normal, "normal mean")?;
    let a = unit(abnormal, "abnormal mean")?;
    Ok((euclidean(&k, &a) - euclidean(&k, &n)).max(0.0))
}

/// Tape version of [`kd_loss`]; `knowledge` is a constant `1 × C` row.
pub fn kd_loss_var(g: &mut Graph, knowledge: Var, normal: Var, abnormal: Var) -> Var {
    let k = g.l2_normalize_rows(knowledge);
    let n = g.l2_normalize_rows(normal);
    let a = g.l2_normalize_rows(abnormal);
    let dist = |g: &mut Graph, x: Var, y: Var| {
        let d = g.sub(x, y);
        let sq = g.mul(d, d);
        let s = g.sum(sq);
        g.sqrt(s)
    };
    let d_ka = dist(g, k, a);
    let d_kn = dist(g, k, n);
    let gap = g.sub(d_ka, d_kn);
    g.relu(gap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{TextEncoderConfig, TinyTextEncoder};

    fn encoder() -> TinyTextEncoder {
        TinyTextEncoder::random(TextEncoderConfig::tiny(), 3).unwrap()
    }

    #[test]
    fn init_defaults_and_determinism() {
        let a = init_prompt_bank(12, 16, 7).unwrap();
        let b = init_prompt_bank(12, 16, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.normal_prefix.shape(), (12, 16));
        assert_ne!(a.normal_prefix, a.abnormal_prefix);
        let std = (a.normal_prefix.as_slice().iter().map(|x| x * x).sum::<f64>() / 192.0).sqrt();
        assert!((std - 0.02).abs() < 0.005, "sample std {std}");
    }

    #[test]
    fn init_rejects_zero_sizes() {
        assert!(matches!(init_prompt_bank(0, 16, 0), Err(Error::InvalidConfig(_))));
        assert!(matches!(init_prompt_bank(4, 0, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn overlapping_state_words_rejected() {
        let cfg =
            PromptConfig { normal_words: vec!["ok".into()], abnormal_words: vec!["ok".into()], ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn two_variants_per_state() {
        let enc = encoder();
        let bank = init_prompt_bank(12, 16, 1).unwrap();
        let (n, a) = assemble_prompts(&bank, "fabric", &enc).unwrap();
        assert_eq!((n.len(), a.len()), (2, 2));
        assert_eq!(n[0].rows(), 12 + 1 + 1);
        assert_eq!(a[1].rows(), 12 + 1 + 1);
        // normal and abnormal prefixes are distinct parameter sets
        assert_eq!(n[0].slice_rows(0, 12), bank.normal_prefix);
        assert_eq!(a[0].slice_rows(0, 12), bank.abnormal_prefix);
    }

    #[test]
    fn length_arithmetic_k1() {
        let enc = encoder();
        let bank = init_prompt_bank(1, 16, 1).unwrap();
        let (n, _) = assemble_prompts(&bank, "wood", &enc).unwrap();
        assert_eq!(n[0].rows(), 3);
        let (n, _) = assemble_prompts(&bank, "metal nut", &enc).unwrap();
        assert_eq!(n[0].rows(), 4);
    }

    #[test]
    fn empty_class_rejected() {
        let enc = encoder();
        let bank = init_prompt_bank(2, 16, 1).unwrap();
        assert!(matches!(assemble_prompts(&bank, "  ", &enc), Err(Error::EmptyClassName)));
    }

    #[test]
    fn text_matrix_shape_and_unit_rows() {
        let enc = encoder();
        let bank = init_prompt_bank(12, 16, 2).unwrap();
        let tf = encode_prompt_bank(&bank, "carpet", &enc).unwrap();
        let m = tf.text_matrix();
        assert_eq!(m.shape(), (2, 16));
        assert!((l2_norm(m.row(0)) - 1.0).abs() < 1e-12);
        assert_eq!(m.row(1), tf.abnormal.as_slice());
    }

    #[test]
    fn tape_features_match_plain() {
        let enc = encoder();
        let bank = init_prompt_bank(12, 16, 2).unwrap();
        let plain = encode_prompt_bank(&bank, "carpet", &enc).unwrap();
        let mut store = ParamStore::new();
        bank.write_params(&mut store);
        let mut g = Graph::new();
        let mut binder = Binder::new(&store, crate::params::TrainableSet::ALL);
        let tv = encode_prompts_var(&mut g, &mut binder, &bank.config, "carpet", &enc).unwrap();
        let nm = g.value(tv.normal_mean).as_slice();
        assert!(nm.iter().zip(&plain.normal_mean).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(g.value(tv.text).max_abs_diff(&plain.text_matrix()) < 1e-12);
    }

    #[test]
    fn kd_loss_cases() {
        let s2 = std::f64::consts::SQRT_2;
        assert!((kd_loss(&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]).unwrap() - s2).abs() < 1e-12);
        assert_eq!(kd_loss(&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(kd_loss(&[0.3, 0.4], &[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(matches!(kd_loss(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]), Err(Error::ZeroNormVector(_))));
    }
}
