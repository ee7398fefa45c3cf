//! Pre-norm transformer blocks shared by the frozen encoders.

use std::collections::BTreeMap;

use rand::Rng;

use crate::attention::{multi_head_attention, multi_head_var};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{gelu, layer_norm_affine, Mat};
use crate::weights::take;

pub const LN_EPS: f64 = 1e-5;

/// Projections of one attention layer. Matrices are input-major: `Q = X·W_q + b_q`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayerParams {
    pub w_q: Mat,
    pub b_q: Mat,
    pub w_k: Mat,
    pub b_k: Mat,
    pub w_v: Mat,
    pub b_v: Mat,
    pub project: Mat,
    pub project_bias: Mat,
    pub heads: usize,
}

impl AttentionLayerParams {
    pub fn width(&self) -> usize {
        self.w_q.rows()
    }

    /// Per-head softmax temperature `1/√(width/heads)`.
    pub fn scale(&self) -> f64 {
        1.0 / ((self.width() / self.heads) as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.width();
        if self.heads == 0 || !w.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!("width {w} not divisible by {} heads", self.heads)));
        }
        for (name, m) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v), ("project", &self.project)] {
            if m.shape() != (w, w) {
                return Err(Error::ShapeMismatch(format!("{name} is {:?}, expected ({w}, {w})", m.shape())));
            }
        }
        Ok(())
    }

    pub fn project_plain(&self, x: &Mat) -> Mat {
        x.matmul_unchecked(&self.project).add_row_broadcast(self.project_bias.as_slice()).unwrap()
    }

    /// `(Q, K, V)` for already-normalized input rows.
    pub fn qkv_plain(&self, h: &Mat) -> (Mat, Mat, Mat) {
        let lin = |w: &Mat, b: &Mat| h.matmul_unchecked(w).add_row_broadcast(b.as_slice()).unwrap();
        (lin(&self.w_q, &self.b_q), lin(&self.w_k, &self.b_k), lin(&self.w_v, &self.b_v))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock {
    pub ln1_gain: Mat,
    pub ln1_bias: Mat,
    pub attn: AttentionLayerParams,
    pub ln2_gain: Mat,
    pub ln2_bias: Mat,
    pub w_fc: Mat,
    pub b_fc: Mat,
    pub w_out: Mat,
    pub b_out: Mat,
}

impl TransformerBlock {
    /// Gaussian weights with standard deviation `std`, zero biases, unit
    /// layer-norm gains.
    pub fn random<R: Rng + ?Sized>(width: usize, heads: usize, std: f64, rng: &mut R) -> Self {
        let hidden = 4 * width;
        Self {
            ln1_gain: Mat::filled(1, width, 1.0),
            ln1_bias: Mat::zeros(1, width),
            attn: AttentionLayerParams {
                w_q: Mat::randn(width, width, std, rng),
                b_q: Mat::zeros(1, width),
                w_k: Mat::randn(width, width, std, rng),
                b_k: Mat::zeros(1, width),
                w_v: Mat::randn(width, width, std, rng),
                b_v: Mat::zeros(1, width),
                project: Mat::randn(width, width, std, rng),
                project_bias: Mat::zeros(1, width),
                heads,
            },
            ln2_gain: Mat::filled(1, width, 1.0),
            ln2_bias: Mat::zeros(1, width),
            w_fc: Mat::randn(width, hidden, std, rng),
            b_fc: Mat::zeros(1, hidden),
            w_out: Mat::randn(hidden, width, std, rng),
            b_out: Mat::zeros(1, width),
        }
    }

    pub fn width(&self) -> usize {
        self.attn.width()
    }

    pub fn ln1(&self, x: &Mat) -> Mat {
        layer_norm_affine(x, self.ln1_gain.as_slice(), self.ln1_bias.as_slice(), LN_EPS)
    }

    /// Attention residual then MLP residual, given the block's `(Q, K, V)`.
    pub fn finish_plain(&self, x: &Mat, q: &Mat, k: &Mat, v: &Mat) -> Mat {
        let attended = multi_head_attention(q, k, v, self.attn.heads).expect("validated heads");
        let mid = x.add(&self.attn.project_plain(&attended)).unwrap();
        let h2 = layer_norm_affine(&mid, self.ln2_gain.as_slice(), self.ln2_bias.as_slice(), LN_EPS);
        let hidden = h2.matmul_unchecked(&self.w_fc).add_row_broadcast(self.b_fc.as_slice()).unwrap().map(gelu);
        let out = hidden.matmul_unchecked(&self.w_out).add_row_broadcast(self.b_out.as_slice()).unwrap();
        mid.add(&out).unwrap()
    }

    /// The standard pre-norm block.
    pub fn forward_plain(&self, x: &Mat) -> Mat {
        let (q, k, v) = self.attn.qkv_plain(&self.ln1(x));
        self.finish_plain(x, &q, &k, &v)
    }

    /// The standard block on the tape; weights enter as constants.
    pub fn forward_var(&self, g: &mut Graph, x: Var) -> Var {
        let c = |g: &mut Graph, m: &Mat| g.constant(m.clone());
        let (g1, b1) = (c(g, &self.ln1_gain), c(g, &self.ln1_bias));
        let h = g.layer_norm_affine(x, g1, b1, LN_EPS);
        let lin = |g: &mut Graph, input: Var, w: &Mat, b: &Mat| {
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            let y = g.matmul(input, wv);
            g.add_row(y, bv)
        };
        let q = lin(g, h, &self.attn.w_q, &self.attn.b_q);
        let k = lin(g, h, &self.attn.w_k, &self.attn.b_k);
        let v = lin(g, h, &self.attn.w_v, &self.attn.b_v);
        let attended = multi_head_var(g, q, k, v, self.attn.heads);
        let projected = lin(g, attended, &self.attn.project, &self.attn.project_bias);
        let mid = g.add(x, projected);
        let (g2, b2) = (c(g, &self.ln2_gain), c(g, &self.ln2_bias));
        let h2 = g.layer_norm_affine(mid, g2, b2, LN_EPS);
        let hidden = lin(g, h2, &self.w_fc, &self.b_fc);
        let hidden = g.gelu(hidden);
        let out = lin(g, hidden, &self.w_out, &self.b_out);
        g.add(mid, out)
    }

    pub(crate) fn export(&self, prefix: &str, out: &mut BTreeMap<String, Mat>) {
        let a = &self.attn;
        for (name, m) in [
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("w_q", &a.w_q),
            ("b_q", &a.b_q),
            ("w_k", &a.w_k),
            ("b_k", &a.b_k),
            ("w_v", &a.w_v),
            ("b_v", &a.b_v),
            ("project", &a.project),
            ("project_bias", &a.project_bias),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("w_fc", &self.w_fc),
            ("b_fc", &self.b_fc),
            ("w_out", &self.w_out),
            ("b_out", &self.b_out),
        ] {
            out.insert(format!("{prefix}.{name}"), m.clone());
        }
    }

    pub(crate) fn import(
        prefix: &str,
        width: usize,
        heads: usize,
        tensors: &mut BTreeMap<String, Mat>,
    ) -> Result<Self> {
        let hidden = 4 * width;
        let mut t = |name: &str, r: usize, c: usize| take(tensors, &format!("{prefix}.{name}"), r, c);
        let block = Self {
            ln1_gain: t("ln1_gain", 1, width)?,
            ln1_bias: t("ln1_bias", 1, width)?,
            attn: AttentionLayerParams {
                w_q: t("w_q", width, width)?,
                b_q: t("b_q", 1, width)?,
                w_k: t("w_k", width, width)?,
                b_k: t("b_k", 1, width)?,
                w_v: t("w_v", width, width)?,
                b_v: t("b_v", 1, width)?,
                project: t("project", width, width)?,
                project_bias: t("project_bias", 1, width)?,
                heads,
            },
            ln2_gain: t("ln2_gain", 1, width)?,
            ln2_bias: t("ln2_bias", 1, width)?,
            w_fc: t("w_fc", width, hidden)?,
            b_fc: t("b_fc", 1, hidden)?,
            w_out: t("w_out", hidden, width)?,
            b_out: t("b_out", 1, width)?,
        };
        block.attn.validate()?;
        Ok(block)
    }
}
