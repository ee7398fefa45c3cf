//! Segmentation, classification and combined training losses.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const FOCAL_GAMMA: f64 = 2.0;
pub const PROB_EPS: f64 = 1e-7;
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0, gamma: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.gamma].iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidConfig(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

fn same_shape(a: &Mat, b: &Mat) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Pixel-mean focal loss with focusing `gamma` and probability clamp `eps`
/// (`eps = 0` disables clamping).
pub fn focal_loss_with(pred: &Mat, mask: &Mat, gamma: f64, eps: f64) -> Result<f64> {
    same_shape(pred, mask)?;
    let total: f64 = pred
        .as_slice()
        .iter()
        .zip(mask.as_slice())
        .map(|(&p, &g)| {
            let p = if eps > 0.0 { p.clamp(eps, 1.0 - eps) } else { p };
            let pt = if g >= 0.5 { p } else { 1.0 - p };
            -(1.0 - pt).powf(gamma) * pt.ln()
        })
        .sum();
    Ok(total / pred.len() as f64)
}

/// `mean(−(1−p_t)²·ln p_t)`, `p_t = P` on mask pixels and `1 − P` elsewhere.
pub fn focal_loss(pred: &Mat, mask: &Mat) -> Result<f64> {
    focal_loss_with(pred, mask, FOCAL_GAMMA, PROB_EPS)
}

/// `1 − (2·ΣP·T + 1)/(ΣP + ΣT + 1)`.
pub fn dice_loss(pred: &Mat, target: &Mat) -> Result<f64> {
    same_shape(pred, target)?;
    let inter: f64 = pred.as_slice().iter().zip(target.as_slice()).map(|(p, t)| p * t).sum();
    Ok(1.0 - (2.0 * inter + DICE_SMOOTH) / (pred.sum() + target.sum() + DICE_SMOOTH))
}

/// `Focal(M^a, G) + Dice(M^n, 1 − G) + Dice(M^a, G)` for one image.
pub fn local_loss(abnormal: &Mat, normal: &Mat, mask: &Mat) -> Result<f64> {
    same_shape(abnormal, normal)?;
    let complement = mask.map(|g| 1.0 - g);
    Ok(focal_loss(abnormal, mask)? + dice_loss(normal, &complement)? + dice_loss(abnormal, mask)?)
}

/// Binary cross-entropy of a score in `[0, 1]`, clamped by [`PROB_EPS`].
pub fn global_loss(score: f64, label: bool) -> Result<f64> {
    if !(0.0..=1.0).contains(&score) {
        return Err(Error::OutOfRangeScore(score));
    }
    let s = score.clamp(PROB_EPS, 1.0 - PROB_EPS);
    Ok(if label { -s.ln() } else { -(1.0 - s).ln() })
}

pub fn total_loss(kd: f64, global: f64, local: f64, w: &LossWeights) -> Result<f64> {
    let total = w.alpha * kd + w.beta * global + w.gamma * local;
    if !kd.is_finite() || !global.is_finite() || !local.is_finite() || !total.is_finite() {
        return Err(Error::NonFiniteLoss(format!("kd={kd} global={global} local={local}")));
    }
    Ok(total)
}

pub fn focal_var(g: &mut Graph, pred: Var, mask: &Mat) -> Var {
    let p = g.clamp(pred, PROB_EPS, 1.0 - PROB_EPS);
    // p_t = (1 − G) + (2G − 1)·P
    let sign = g.constant(mask.map(|m| 2.0 * m - 1.0));
    let base = g.constant(mask.map(|m| 1.0 - m));
    let signed = g.mul(sign, p);
    let pt = g.add(base, signed);
    let miss = g.rsub_const(1.0, pt);
    let weight = g.pow_const(miss, FOCAL_GAMMA);
    let log = g.ln(pt);
    let per_pixel = g.mul(weight, log);
    let mean = g.mean(per_pixel);
    g.neg(mean)
}

pub fn dice_var(g: &mut Graph, pred: Var, target: &Mat) -> Var {
    let t = g.constant(target.clone());
    let prod = g.mul(pred, t);
    let inter = g.sum(prod);
    let num = g.scale(inter, 2.0);
    let num = g.add_const(num, DICE_SMOOTH);
    let sp = g.sum(pred);
    let den = g.add_const(sp, target.sum() + DICE_SMOOTH);
    let inv = g.recip(den);
    let ratio = g.mul(num, inv);
    g.rsub_const(1.0, ratio)
}

pub fn local_var(g: &mut Graph, abnormal: Var, normal: Var, mask: &Mat) -> Var {
    let focal = focal_var(g, abnormal, mask);
    let dn = dice_var(g, normal, &mask.map(|m| 1.0 - m));
    let da = dice_var(g, abnormal, mask);
    let s = g.add(focal, dn);
    g.add(s, da)
}

/// BCE of a `1 × 1` score var.
pub fn bce_var(g: &mut Graph, score: Var, label: bool) -> Var {
    let s = g.clamp(score, PROB_EPS, 1.0 - PROB_EPS);
    let target = if label { s } else { g.rsub_const(1.0, s) };
    let log = g.ln(target);
    g.neg(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Mat {
        Mat::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn focal_values() {
        let fl = focal_loss(&m(1, 1, &[0.5]), &m(1, 1, &[1.0])).unwrap();
        assert!((fl - 0.25 * 2f64.ln()).abs() < 1e-12);
        let fl0 = focal_loss(&m(1, 1, &[0.5]), &m(1, 1, &[0.0])).unwrap();
        assert!((fl - fl0).abs() < 1e-15);
        let perfect = focal_loss(&m(1, 2, &[1.0, 0.0]), &m(1, 2, &[1.0, 0.0])).unwrap();
        assert!(perfect < 1e-12);
    }

    #[test]
    fn dice_values() {
        assert!((dice_loss(&m(1, 2, &[1.0, 0.0]), &m(1, 2, &[0.0, 1.0])).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((dice_loss(&m(1, 2, &[1.0, 1.0]), &m(1, 2, &[1.0, 0.0])).unwrap() - 0.25).abs() < 1e-12);
        let ones = Mat::filled(10, 10, 1.0);
        assert!(dice_loss(&ones, &ones).unwrap().abs() < 1e-15);
    }

    #[test]
    fn local_value() {
        let half = Mat::filled(2, 2, 0.5);
        let mask = m(2, 2, &[1.0, 1.0, 0.0, 0.0]);
        let v = local_loss(&half, &half, &mask).unwrap();
        assert!((v - (0.25 * 2f64.ln() + 0.8)).abs() < 1e-12);
        let perfect = local_loss(&mask, &mask.map(|g| 1.0 - g), &mask).unwrap();
        assert!(perfect < 1e-6);
    }

    #[test]
    fn bce_values() {
        assert!((global_loss(0.5, true).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((global_loss(0.5, false).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((global_loss(0.9, true).unwrap() + 0.9f64.ln()).abs() < 1e-12);
        assert!(global_loss(1.0 - 1e-7, true).unwrap() < 1e-6);
        assert!(matches!(global_loss(1.2, true), Err(Error::OutOfRangeScore(_))));
    }

    #[test]
    fn total_values() {
        let w = LossWeights::default();
        assert!((total_loss(0.2, 0.3, 0.5, &w).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w).unwrap(), 0.0);
        let no_local = LossWeights { gamma: 0.0, ..w };
        assert!((total_loss(0.2, 0.3, 7.0, &no_local).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(total_loss(f64::NAN, 0.0, 0.0, &w), Err(Error::NonFiniteLoss(_))));
    }

    #[test]
    fn focal_without_focusing_is_bce() {
        let p = m(1, 4, &[0.1, 0.7, 0.4, 0.95]);
        let g = m(1, 4, &[1.0, 0.0, 1.0, 1.0]);
        let bce: f64 = (0..4)
            .map(|i| {
                let (p, y) = (p.as_slice()[i], g.as_slice()[i]);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 4.0;
        assert!((focal_loss_with(&p, &g, 0.0, 0.0).unwrap() - bce).abs() < 1e-9);
    }

    #[test]
    fn tape_matches_plain() {
        let p = m(2, 2, &[0.2, 0.6, 0.9, 0.3]);
        let n = p.map(|v| 1.0 - v * 0.8);
        let mask = m(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let mut g = Graph::new();
        let pv = g.constant(p.clone());
        let nv = g.constant(n.clone());
        let l = local_var(&mut g, pv, nv, &mask);
        assert!((g.scalar(l) - local_loss(&p, &n, &mask).unwrap()).abs() < 1e-12);
        let s = g.scalar_constant(0.3);
        let b = bce_var(&mut g, s, false);
        assert!((g.scalar(b) - global_loss(0.3, false).unwrap()).abs() < 1e-12);
    }
}
