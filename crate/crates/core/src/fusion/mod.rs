//! Bidirectional cross-modal fusion of stage patch features with the text
//! features, producing per-stage normal/abnormal maps.
//!
//! Each stage owns an independent parameter set under `fusion.<i>.`:
//! a visual projection to the text width, a deformable self-attention over
//! the patch grid, self-attention over the two text rows, and the
//! text-to-visual and visual-to-text cross-attentions. Every attention block
//! is wrapped in a residual connection.

pub mod maps;
pub mod sampling;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::attention_var;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore, TrainableSet};
use crate::tensor::Mat;
use crate::vision::StageFeatures;

pub use maps::{aggregate_maps, final_map, gaussian_filter, STAGE_COUNT};
pub use sampling::bilinear_sample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionBlock {
    Deformable,
    TextSelf,
    TextToVisual,
    VisualToText,
}

/// `Full` runs the configured blocks; `PlainCosine` scores projected patch
/// features directly against the text rows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Full,
    PlainCosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Text feature width `C`.
    pub text_dim: usize,
    /// Patch feature width `C_i` of each stage.
    pub stage_dims: [usize; STAGE_COUNT],
    /// Softmax temperature `τ` of the per-location two-class scores.
    pub tau: f64,
    /// Sampled points per deformable query.
    pub sample_points: usize,
    pub blocks: Vec<FusionBlock>,
    pub mode: FusionMode,
}

impl FusionConfig {
    pub fn new(stage_dim: usize, text_dim: usize) -> Self {
        Self {
            text_dim,
            stage_dims: [stage_dim; STAGE_COUNT],
            tau: 0.07,
            sample_points: 1,
            blocks: vec![
                FusionBlock::Deformable,
                FusionBlock::TextSelf,
                FusionBlock::TextToVisual,
                FusionBlock::VisualToText,
            ],
            mode: FusionMode::Full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidConfig(format!("temperature must be positive, got {}", self.tau)));
        }
        if self.sample_points == 0 || self.text_dim == 0 || self.stage_dims.contains(&0) {
            return Err(Error::InvalidConfig("fusion widths and sample count must be positive".into()));
        }
        Ok(())
    }
}

/// Query/key/value/output projections of one single-head attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub w_o: Mat,
}

/// Deformable self-attention parameters: the attention projections plus
/// the offset predictor (`C × 2P` weights and `1 × 2P` bias).
#[derive(Clone, Debug, PartialEq)]
pub struct DeformParams {
    pub attn: AttentionParams,
    pub offset_w: Mat,
    pub offset_b: Mat,
}

fn name(stage: usize, rest: &str) -> String {
    format!("fusion.{stage}.{rest}")
}

const ATTN_KEYS: [&str; 4] = ["w_q", "w_k", "w_v", "w_o"];
const BLOCK_KEYS: [&str; 4] = ["deform", "text_self", "t2v", "v2t"];

#[derive(Clone, Copy)]
struct AttnVars {
    q: Var,
    k: Var,
    v: Var,
    o: Var,
}

impl AttnVars {
    fn bind(g: &mut Graph, binder: &mut Binder<'_>, stage: usize, block: &str) -> Self {
        let mut get = |k: &str| binder.get(g, &name(stage, &format!("{block}.{k}")));
        Self { q: get("w_q"), k: get("w_k"), v: get("w_v"), o: get("w_o") }
    }

    fn constants(g: &mut Graph, p: &AttentionParams) -> Self {
        Self {
            q: g.constant(p.w_q.clone()),
            k: g.constant(p.w_k.clone()),
            v: g.constant(p.w_v.clone()),
            o: g.constant(p.w_o.clone()),
        }
    }
}

/// `Attention(X_q·W_q, X_c·W_k, X_c·W_v)·W_o` with scale `1/√C`.
fn attend(g: &mut Graph, queries: Var, context: Var, p: AttnVars) -> Var {
    let width = g.shape(p.q).1;
    let q = g.matmul(queries, p.q);
    let k = g.matmul(context, p.k);
    let v = g.matmul(context, p.v);
    let out = attention_var(g, q, k, v, 1.0 / (width as f64).sqrt());
    g.matmul(out, p.o)
}

/// `(y, x)` grid coordinates of each token, repeated for `points` samples.
fn reference_points(height: usize, width: usize, points: usize) -> Mat {
    let mut m = Mat::zeros(height * width, 2 * points);
    for y in 0..height {
        for x in 0..width {
            for p in 0..points {
                m[(y * width + x, 2 * p)] = y as f64;
                m[(y * width + x, 2 * p + 1)] = x as f64;
            }
        }
    }
    m
}

/// Deformable self-attention at explicit sampling points (`T × 2P`).
fn deformable_at(g: &mut Graph, x: Var, points: Var, height: usize, width: usize, p: AttnVars) -> Var {
    let sampled = g.bilinear_sample(x, points, height, width);
    attend(g, x, sampled, p)
}

fn deformable_var(g: &mut Graph, x: Var, height: usize, width: usize, p: AttnVars, off_w: Var, off_b: Var) -> Var {
    let points_per_query = g.shape(off_w).1 / 2;
    let raw = g.matmul(x, off_w);
    let offsets = g.add_row(raw, off_b);
    let reference = g.constant(reference_points(height, width, points_per_query));
    let points = g.add(reference, offsets);
    deformable_at(g, x, points, height, width, p)
}

/// Attention of every grid token over features bilinearly sampled at
/// `reference + offset`, with offsets predicted per query. Returns the
/// attention output (residual not included). With zero offsets this is
/// plain self-attention over the flattened grid.
pub fn deformable_self_attention(x: &Mat, height: usize, width: usize, params: &DeformParams) -> Result<Mat> {
    check_grid(x, height, width)?;
    check_square(&params.attn, x.cols())?;
    if params.offset_w.rows() != x.cols() || !params.offset_w.cols().is_multiple_of(2) || params.offset_w.cols() == 0 {
        return Err(Error::ShapeMismatch("offset predictor must map C to 2 values per sample".into()));
    }
    if params.offset_b.shape() != (1, params.offset_w.cols()) {
        return Err(Error::ShapeMismatch("offset bias width".into()));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let p = AttnVars::constants(&mut g, &params.attn);
    let ow = g.constant(params.offset_w.clone());
    let ob = g.constant(params.offset_b.clone());
    let out = deformable_var(&mut g, xv, height, width, p, ow, ob);
    Ok(g.value(out).clone())
}

/// Deformable attention with caller-supplied sampling points (`T × 2P`).
pub fn deformable_attention_at(
    x: &Mat,
    height: usize,
    width: usize,
    points: &Mat,
    attn: &AttentionParams,
) -> Result<Mat> {
    check_grid(x, height, width)?;
    check_square(attn, x.cols())?;
    if points.rows() != x.rows() || !points.cols().is_multiple_of(2) || points.cols() == 0 {
        return Err(Error::ShapeMismatch("points must be T x 2P".into()));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let pv = g.constant(points.clone());
    let p = AttnVars::constants(&mut g, attn);
    let out = deformable_at(&mut g, xv, pv, height, width, p);
    Ok(g.value(out).clone())
}

fn check_grid(x: &Mat, height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || x.rows() != height * width {
        return Err(Error::ShapeMismatch(format!("{} tokens for a {height}x{width} grid", x.rows())));
    }
    Ok(())
}

fn check_square(p: &AttentionParams, c: usize) -> Result<()> {
    for m in [&p.w_q, &p.w_k, &p.w_v, &p.w_o] {
        if m.shape() != (c, c) {
            return Err(Error::ShapeMismatch(format!("attention weight {:?} for width {c}", m.shape())));
        }
    }
    Ok(())
}

/// The fusion head over all stages.
#[derive(Clone, Debug, PartialEq)]
pub struct Fusion {
    pub config: FusionConfig,
}

impl Fusion {
    pub fn new(config: FusionConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    /// Visual projections `N(0, 1/C_i)`, attention projections
    /// `N(0, 1/C)`, output projections `N(0, 0.02²)` and a zero offset
    /// predictor, so every block starts close to the identity and
    /// deformable sampling starts on the regular grid.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let c = self.config.text_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (i, &ci) in self.config.stage_dims.iter().enumerate() {
            store.insert(name(i, "visual_proj"), Mat::randn(ci, c, 1.0 / (ci as f64).sqrt(), &mut rng));
            for block in BLOCK_KEYS {
                for key in ATTN_KEYS {
                    let std = if key == "w_o" { 0.02 } else { 1.0 / (c as f64).sqrt() };
                    store.insert(name(i, &format!("{block}.{key}")), Mat::randn(c, c, std, &mut rng));
                }
            }
            let p2 = 2 * self.config.sample_points;
            store.insert(name(i, "deform.offset_w"), Mat::zeros(c, p2));
            store.insert(name(i, "deform.offset_b"), Mat::zeros(1, p2));
        }
        store
    }

    /// Deformable-attention parameters of one stage, copied out of the store.
    pub fn deform_params(store: &ParamStore, stage: usize) -> DeformParams {
        let get = |k: &str| store.expect(&name(stage, k)).clone();
        DeformParams {
            attn: AttentionParams {
                w_q: get("deform.w_q"),
                w_k: get("deform.w_k"),
                w_v: get("deform.w_v"),
                w_o: get("deform.w_o"),
            },
            offset_w: get("deform.offset_w"),
            offset_b: get("deform.offset_b"),
        }
    }

    fn check_inputs(&self, stage: usize, features: &StageFeatures, text: &Mat) -> Result<()> {
        if stage >= STAGE_COUNT {
            return Err(Error::MissingStage { expected: STAGE_COUNT, got: stage + 1 });
        }
        check_grid(&features.features, features.height, features.width)?;
        if features.features.cols() != self.config.stage_dims[stage] {
            return Err(Error::ShapeMismatch(format!(
                "stage {stage} features have width {}, expected {}",
                features.features.cols(),
                self.config.stage_dims[stage]
            )));
        }
        if text.shape() != (2, self.config.text_dim) {
            return Err(Error::ShapeMismatch(format!(
                "text features are {:?}, expected (2, {})",
                text.shape(),
                self.config.text_dim
            )));
        }
        Ok(())
    }

    /// `(M^n_i, M^a_i)` for one stage, each `H_i × W_i`.
    pub fn bica_stage(
        &self,
        params: &ParamStore,
        stage: usize,
        features: &StageFeatures,
        text: &Mat,
    ) -> Result<(Mat, Mat)> {
        self.check_inputs(stage, features, text)?;
        let mut g = Graph::new();
        let mut binder = Binder::new(params, TrainableSet::NONE);
        let f = g.constant(features.features.clone());
        let t = g.constant(text.clone());
        let (mn, ma) = self.stage_var(&mut g, &mut binder, stage, f, features.height, features.width, t);
        Ok((g.value(mn).clone(), g.value(ma).clone()))
    }

    /// Refined visual tokens and text rows for one stage (before scoring).
    pub fn refine_var(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        stage: usize,
        features: Var,
        height: usize,
        width: usize,
        text: Var,
    ) -> (Var, Var) {
        let proj = binder.get(g, &name(stage, "visual_proj"));
        let mut x = g.matmul(features, proj);
        let mut t = text;
        if self.config.mode == FusionMode::PlainCosine {
            return (x, t);
        }
        for block in &self.config.blocks {
            match block {
                FusionBlock::Deformable => {
                    let p = AttnVars::bind(g, binder, stage, "deform");
                    let ow = binder.get(g, &name(stage, "deform.offset_w"));
                    let ob = binder.get(g, &name(stage, "deform.offset_b"));
                    let update = deformable_var(g, x, height, width, p, ow, ob);
                    x = g.add(x, update);
                }
                FusionBlock::TextSelf => {
                    let p = AttnVars::bind(g, binder, stage, "text_self");
                    let update = attend(g, t, t, p);
                    t = g.add(t, update);
                }
                FusionBlock::TextToVisual => {
                    let p = AttnVars::bind(g, binder, stage, "t2v");
                    let update = attend(g, t, x, p);
                    t = g.add(t, update);
                }
                FusionBlock::VisualToText => {
                    let p = AttnVars::bind(g, binder, stage, "v2t");
                    let update = attend(g, x, t, p);
                    x = g.add(x, update);
                }
            }
        }
        (x, t)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn stage_var(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        stage: usize,
        features: Var,
        height: usize,
        width: usize,
        text: Var,
    ) -> (Var, Var) {
        let (x, t) = self.refine_var(g, binder, stage, features, height, width, text);
        let (normal, abnormal) = two_class_maps(g, x, t, self.config.tau);
        (g.reshape(normal, height, width), g.reshape(abnormal, height, width))
    }
}

/// Per-token two-class softmax of `cos(x, t_row)/τ`; returns `T × 1`
/// normal and abnormal columns.
pub fn two_class_maps(g: &mut Graph, visual: Var, text: Var, tau: f64) -> (Var, Var) {
    let xn = g.l2_normalize_rows(visual);
    let tn = g.l2_normalize_rows(text);
    let tt = g.transpose(tn);
    let cos = g.matmul(xn, tt);
    let logits = g.scale(cos, 1.0 / tau);
    let probs = g.softmax_rows(logits);
    (g.slice_cols(probs, 0, 1), g.slice_cols(probs, 1, 2))
}

/// Two-class probabilities from cosine similarities: `(p_normal, p_abnormal)`.
pub fn two_class_probability(cos_normal: f64, cos_abnormal: f64, tau: f64) -> (f64, f64) {
    let a = 1.0 / (1.0 + ((cos_normal - cos_abnormal) / tau).exp());
    (1.0 - a, a)
}
