//! Bottleneck adapter on the global image feature and the global anomaly
//! score.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::tensor::{layer_norm_affine, Mat};
use crate::transformer::LN_EPS;

pub const LN_SCALE: &str = "adapter.ln_scale";
pub const LN_SHIFT: &str = "adapter.ln_shift";
pub const W_DOWN: &str = "adapter.w_down";
pub const W_UP: &str = "adapter.w_up";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct AdapterConfig {
    /// Bottleneck width; `None` means `max(1, d/4)`.
    pub bottleneck: Option<usize>,
    /// Adds `I_G` back onto the adapter output.
    pub residual: bool,
    /// Skips the adapter entirely (`Î_G = I_G`).
    pub identity: bool,
}


impl AdapterConfig {
    pub fn bottleneck_for(&self, d: usize) -> usize {
        self.bottleneck.unwrap_or((d / 4).max(1))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    /// `1 × d`.
    pub ln_scale: Mat,
    /// `1 × d`.
    pub ln_shift: Mat,
    /// `d × d_bottle`.
    pub w_down: Mat,
    /// `d_bottle × d`.
    pub w_up: Mat,
}

impl AdapterParams {
    pub fn random(d: usize, bottleneck: usize, seed: u64) -> Result<Self> {
        if bottleneck == 0 || bottleneck > d {
            return Err(Error::InvalidConfig(format!("bottleneck {bottleneck} outside 1..={d}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            ln_scale: Mat::filled(1, d, 1.0),
            ln_shift: Mat::zeros(1, d),
            w_down: Mat::randn(d, bottleneck, 1.0 / (d as f64).sqrt(), &mut rng),
            w_up: Mat::randn(bottleneck, d, 1.0 / (bottleneck as f64).sqrt(), &mut rng),
        })
    }

    pub fn dim(&self) -> usize {
        self.ln_scale.cols()
    }

    pub fn bottleneck(&self) -> usize {
        self.w_down.cols()
    }

    fn validate(&self) -> Result<()> {
        let (d, b) = (self.dim(), self.bottleneck());
        if self.ln_shift.shape() != (1, d)
            || self.ln_scale.rows() != 1
            || self.w_down.rows() != d
            || self.w_up.shape() != (b, d)
            || b == 0
            || b > d
        {
            return Err(Error::ShapeMismatch("inconsistent adapter parameter shapes".into()));
        }
        Ok(())
    }

    pub fn write_params(&self, store: &mut ParamStore) {
        store.insert(LN_SCALE, self.ln_scale.clone());
        store.insert(LN_SHIFT, self.ln_shift.clone());
        store.insert(W_DOWN, self.w_down.clone());
        store.insert(W_UP, self.w_up.clone());
    }

    pub fn from_params(store: &ParamStore) -> Result<Self> {
        let get = |name: &str| {
            store.get(name).cloned().ok_or_else(|| Error::WeightLoadFailure(format!("missing parameter `{name}`")))
        };
        let p = Self { ln_scale: get(LN_SCALE)?, ln_shift: get(LN_SHIFT)?, w_down: get(W_DOWN)?, w_up: get(W_UP)? };
        p.validate()?;
        Ok(p)
    }
}

/// `Î_G = ReLU(LN(I_G)·W_down)·W_up` (plus `I_G` when `residual`).
pub fn adapt_global(global: &[f64], params: &AdapterParams, residual: bool) -> Result<Vec<f64>> {
    params.validate()?;
    if global.len() != params.dim() {
        return Err(Error::ShapeMismatch(format!("global feature width {} vs adapter {}", global.len(), params.dim())));
    }
    let x = Mat::row_vector(global);
    let normed = layer_norm_affine(&x, params.ln_scale.as_slice(), params.ln_shift.as_slice(), LN_EPS);
    let hidden = normed.matmul(&params.w_down)?.map(|v| v.max(0.0));
    let mut out = hidden.matmul(&params.w_up)?;
    if residual {
        out.add_assign(&x);
    }
    Ok(out.into_vec())
}

/// Per-image scoring outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    /// `abnormal_prob + map_max`, in `[0, 2]`.
    pub s_global: f64,
    pub abnormal_prob: f64,
    pub map_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<bool>,
}

impl ScoreRecord {
    pub fn new(abnormal_prob: f64, map_max: f64) -> Self {
        Self { s_global: abnormal_prob + map_max, abnormal_prob, map_max, label: None }
    }

    pub fn with_label(mut self, label: bool) -> Self {
        self.label = Some(label);
        self
    }
}

/// Abnormal softmax component of `(Î_G·F_nᵀ, Î_G·F_aᵀ)`.
pub fn abnormal_probability(adapted: &[f64], text: &Mat) -> Result<f64> {
    if text.rows() != 2 || text.cols() != adapted.len() {
        return Err(Error::ShapeMismatch(format!(
            "adapted width {} against text features {:?}",
            adapted.len(),
            text.shape()
        )));
    }
    let ln = crate::tensor::dot(adapted, text.row(0));
    let la = crate::tensor::dot(adapted, text.row(1));
    Ok(1.0 / (1.0 + (ln - la).exp()))
}

/// `S_global = softmax(Î_G·F_textᵀ)[abnormal] + max(M)`.
pub fn global_score(adapted: &[f64], text: &Mat, map: &Mat) -> Result<ScoreRecord> {
    if map.is_empty() {
        return Err(Error::ShapeMismatch("empty anomaly map".into()));
    }
    Ok(ScoreRecord::new(abnormal_probability(adapted, text)?, map.max()))
}

/// Tape version of [`adapt_global`] on a `1 × d` row.
pub fn adapt_var(g: &mut Graph, binder: &mut Binder<'_>, global: Var, config: &AdapterConfig) -> Var {
    if config.identity {
        return global;
    }
    let scale = binder.get(g, LN_SCALE);
    let shift = binder.get(g, LN_SHIFT);
    let down = binder.get(g, W_DOWN);
    let up = binder.get(g, W_UP);
    let normed = g.layer_norm_affine(global, scale, shift, LN_EPS);
    let h = g.matmul(normed, down);
    let h = g.relu(h);
    let out = g.matmul(h, up);
    if config.residual {
        g.add(out, global)
    } else {
        out
    }
}

/// Tape scoring: returns `(abnormal_prob, map_max)` scalars.
pub fn score_var(g: &mut Graph, adapted: Var, text: Var, map: Var) -> (Var, Var) {
    let tt = g.transpose(text);
    let logits = g.matmul(adapted, tt);
    let probs = g.softmax_rows(logits);
    let abnormal = g.slice_cols(probs, 1, 2);
    let abnormal = g.sum(abnormal);
    (abnormal, g.max(map))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(d: usize, b: usize) -> AdapterParams {
        AdapterParams::random(d, b, 5).unwrap()
    }

    #[test]
    fn zero_down_projection_gives_zero() {
        let mut p = params(8, 2);
        p.w_down = Mat::zeros(8, 2);
        let out = adapt_global(&[0.3; 8], &p, false).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_dim_formula() {
        let p = AdapterParams {
            ln_scale: Mat::filled(1, 2, 1.0),
            ln_shift: Mat::zeros(1, 2),
            w_down: Mat::from_vec(2, 1, vec![1.0, 0.0]).unwrap(),
            w_up: Mat::from_vec(1, 2, vec![2.0, -3.0]).unwrap(),
        };
        let out = adapt_global(&[1.0, -1.0], &p, false).unwrap();
        // LN((1,-1)) = (1,-1)/sqrt(1+eps); first coordinate survives the ReLU.
        let h = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((out[0] - 2.0 * h).abs() < 1e-12);
        assert!((out[1] + 3.0 * h).abs() < 1e-12);
    }

    #[test]
    fn zero_input_is_well_defined() {
        let out = adapt_global(&[0.0; 8], &params(8, 2), false).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
        assert_eq!(out.len(), 8);
    }

    #[test]
    fn residual_adds_input() {
        let p = params(8, 2);
        let x: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        let plain = adapt_global(&x, &p, false).unwrap();
        let res = adapt_global(&x, &p, true).unwrap();
        for i in 0..8 {
            assert!((res[i] - plain[i] - x[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_errors() {
        assert!(matches!(adapt_global(&[0.0; 7], &params(8, 2), false), Err(Error::ShapeMismatch(_))));
        assert!(matches!(AdapterParams::random(4, 5, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn score_arithmetic() {
        let text = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let equal = global_score(&[0.0, 0.0], &text, &Mat::zeros(2, 2)).unwrap();
        assert_eq!(equal.s_global, 0.5);
        let mut m = Mat::zeros(2, 2);
        m[(1, 0)] = 0.2;
        let r = global_score(&[0.0, 3f64.ln()], &text, &m).unwrap();
        assert!((r.abnormal_prob - 0.75).abs() < 1e-12);
        assert!((r.s_global - 0.95).abs() < 1e-12);
        let low = global_score(&[0.0, -50.0], &text, &Mat::zeros(2, 2)).unwrap();
        assert!(low.s_global < 1e-20);
    }

    #[test]
    fn round_trip_through_store() {
        let p = params(8, 2);
        let mut store = ParamStore::new();
        p.write_params(&mut store);
        assert_eq!(AdapterParams::from_params(&store).unwrap(), p);
    }
}
