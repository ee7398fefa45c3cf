//! Scaled dot-product attention, plain and on the tape.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{softmax_rows_inplace, Mat};

/// `softmax(Q · Kᵀ · scale) · V` with a row-wise softmax.
pub fn scaled_attention(q: &Mat, k: &Mat, v: &Mat, scale: f64) -> Result<Mat> {
    if q.cols() != k.cols() {
        return Err(Error::ShapeMismatch(format!("query width {} vs key width {}", q.cols(), k.cols())));
    }
    if k.rows() != v.rows() {
        return Err(Error::ShapeMismatch(format!("{} keys vs {} values", k.rows(), v.rows())));
    }
    if !(scale > 0.0) {
        return Err(Error::InvalidConfig(format!("attention scale must be positive, got {scale}")));
    }
    Ok(attention_weights(q, k, scale).matmul_unchecked(v))
}

/// The row-stochastic matrix `softmax(Q · Kᵀ · scale)`.
pub fn attention_weights(q: &Mat, k: &Mat, scale: f64) -> Mat {
    let mut logits = q.matmul_bt(k).scale(scale);
    softmax_rows_inplace(&mut logits);
    logits
}

/// Multi-head attention over pre-projected `Q`, `K`, `V`: columns are split
/// into `heads` equal slices, each attended with `1/√(width/heads)`, and the
/// head outputs are concatenated.
pub fn multi_head_attention(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> Result<Mat> {
    let width = q.cols();
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(Error::InvalidConfig(format!("width {width} not divisible into {heads} heads")));
    }
    let hw = width / heads;
    let scale = 1.0 / (hw as f64).sqrt();
    let outs = (0..heads)
        .map(|h| {
            let (s, e) = (h * hw, (h + 1) * hw);
            scaled_attention(&q.slice_cols(s, e), &k.slice_cols(s, e), &v.slice_cols(s, e), scale)
        })
        .collect::<Result<Vec<_>>>()?;
    Mat::concat_cols(&outs.iter().collect::<Vec<_>>())
}

pub fn attention_var(g: &mut Graph, q: Var, k: Var, v: Var, scale: f64) -> Var {
    let kt = g.transpose(k);
    let logits = g.matmul(q, kt);
    let logits = g.scale(logits, scale);
    let weights = g.softmax_rows(logits);
    g.matmul(weights, v)
}

pub fn multi_head_var(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Var {
    let width = g.shape(q).1;
    let hw = width / heads;
    let scale = 1.0 / (hw as f64).sqrt();
    if heads == 1 {
        return attention_var(g, q, k, v, scale);
    }
    let outs: Vec<Var> = (0..heads)
        .map(|h| {
            let (s, e) = (h * hw, (h + 1) * hw);
            let qh = g.slice_cols(q, s, e);
            let kh = g.slice_cols(k, s, e);
            let vh = g.slice_cols(v, s, e);
            attention_var(g, qh, kh, vh, scale)
        })
        .collect();
    g.concat_cols(&outs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_key_returns_its_value() {
        let q = Mat::from_rows(&[vec![0.3, -1.0], vec![5.0, 2.0]]).unwrap();
        let k = Mat::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let v = Mat::from_rows(&[vec![7.0, -2.0, 0.5]]).unwrap();
        let out = scaled_attention(&q, &k, &v, 0.5).unwrap();
        for r in 0..2 {
            assert_eq!(out.row(r), v.row(0));
        }
    }

    #[test]
    fn identical_values_pass_through() {
        let q = Mat::from_rows(&[vec![0.3, -1.0], vec![5.0, 2.0], vec![0.0, 0.0]]).unwrap();
        let k = Mat::from_rows(&[vec![1.0, 0.0], vec![-2.0, 4.0]]).unwrap();
        let v = Mat::from_rows(&[vec![1.5, 2.5], vec![1.5, 2.5]]).unwrap();
        let out = scaled_attention(&q, &k, &v, 1.0).unwrap();
        for r in 0..3 {
            assert!((out[(r, 0)] - 1.5).abs() < 1e-12 && (out[(r, 1)] - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_inputs_hand_value() {
        let i = Mat::identity(2);
        let out = scaled_attention(&i, &i, &i, 1.0).unwrap();
        assert!((out[(0, 0)] - 0.731_058_578_630_004_9).abs() < 1e-6);
        assert!((out[(0, 1)] - 0.268_941_421_369_995_1).abs() < 1e-6);
    }

    #[test]
    fn shape_errors() {
        let a = Mat::zeros(2, 3);
        assert!(matches!(scaled_attention(&a, &Mat::zeros(2, 2), &a, 1.0), Err(Error::ShapeMismatch(_))));
        assert!(matches!(scaled_attention(&a, &a, &Mat::zeros(3, 3), 1.0), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn tape_matches_plain_multi_head() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let q = Mat::randn(5, 8, 1.0, &mut rng);
        let k = Mat::randn(6, 8, 1.0, &mut rng);
        let v = Mat::randn(6, 8, 1.0, &mut rng);
        let plain = multi_head_attention(&q, &k, &v, 4).unwrap();
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v));
        let out = multi_head_var(&mut g, qv, kv, vv, 4);
        assert!(g.value(out).max_abs_diff(&plain) < 1e-12);
    }
}
