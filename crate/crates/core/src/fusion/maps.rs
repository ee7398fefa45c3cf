//! Stage-map aggregation, min-max normalization and Gaussian smoothing.
//!
//! Every resampling and smoothing step here is a fixed linear map applied
//! separably, `L · X · Rᵀ`, so the same matrices serve the plain functions
//! and their differentiable counterparts.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Number of encoder stages whose maps are fused.
pub const STAGE_COUNT: usize = 4;

/// `dst × src` bilinear resampling matrix with half-pixel centers and edge
/// clamping. Identity when `src == dst`.
pub fn resample_matrix(src: usize, dst: usize) -> Mat {
    if src == dst {
        return Mat::identity(src);
    }
    let mut m = Mat::zeros(dst, src);
    let ratio = src as f64 / dst as f64;
    for o in 0..dst {
        let s = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        let f = s - lo as f64;
        m[(o, lo)] += 1.0 - f;
        m[(o, hi)] += f;
    }
    m
}

/// Discrete Gaussian weights for offsets `-r..=r`, `r = ⌈3σ⌉`, summing to 1.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let weights: Vec<f64> = (-radius..=radius).map(|j| (-((j * j) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Reflects an out-of-range index back into `0..n`, repeating the edge
/// sample (`d c b a | a b c d | d c b a`).
pub fn reflect_index(i: i64, n: usize) -> usize {
    let period = 2 * n as i64;
    let m = i.rem_euclid(period);
    if m < n as i64 {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// `n × n` matrix applying the 1-D Gaussian with reflect padding.
pub fn gaussian_matrix(n: usize, sigma: f64) -> Mat {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let mut m = Mat::zeros(n, n);
    for i in 0..n {
        for (k, &w) in kernel.iter().enumerate() {
            let j = reflect_index(i as i64 + k as i64 - radius, n);
            m[(i, j)] += w;
        }
    }
    m
}

/// Separable Gaussian smoothing of an `H × W` map. `sigma == 0` is the
/// identity.
pub fn gaussian_filter(map: &Mat, sigma: f64) -> Mat {
    if sigma <= 0.0 {
        return map.clone();
    }
    let gh = gaussian_matrix(map.rows(), sigma);
    let gw = gaussian_matrix(map.cols(), sigma);
    gh.matmul_unchecked(map).matmul_bt(&gw)
}

pub fn resize_bilinear(map: &Mat, height: usize, width: usize) -> Mat {
    if map.shape() == (height, width) {
        return map.clone();
    }
    let rh = resample_matrix(map.rows(), height);
    let rw = resample_matrix(map.cols(), width);
    rh.matmul_unchecked(map).matmul_bt(&rw)
}

/// Min-max normalization into `[0, 1]`; a constant map becomes all zeros.
pub fn min_max_normalize(map: &Mat) -> Mat {
    let (lo, hi) = (map.min(), map.max());
    if hi <= lo {
        return Mat::zeros(map.rows(), map.cols());
    }
    let inv = 1.0 / (hi - lo);
    map.map(|x| ((x - lo) * inv).clamp(0.0, 1.0))
}

/// Upsamples each stage pair to `H × W`, sums across stages and min-max
/// normalizes the normal and abnormal sums separately.
pub fn aggregate_maps(per_stage: &[(Mat, Mat)], height: usize, width: usize) -> Result<(Mat, Mat)> {
    if per_stage.len() != STAGE_COUNT {
        return Err(Error::MissingStage { expected: STAGE_COUNT, got: per_stage.len() });
    }
    let mut normal = Mat::zeros(height, width);
    let mut abnormal = Mat::zeros(height, width);
    for (mn, ma) in per_stage {
        if mn.shape() != ma.shape() {
            return Err(Error::ShapeMismatch("stage normal/abnormal maps differ in shape".into()));
        }
        normal.add_assign(&resize_bilinear(mn, height, width));
        abnormal.add_assign(&resize_bilinear(ma, height, width));
    }
    Ok((min_max_normalize(&normal), min_max_normalize(&abnormal)))
}

/// `G_σ((M^a + 1 − M^n) / 2)`.
pub fn final_map(normal: &Mat, abnormal: &Mat, sigma: f64) -> Result<Mat> {
    let combined = abnormal.zip_map(normal, |a, n| (a + 1.0 - n) / 2.0)?;
    Ok(gaussian_filter(&combined, sigma).map(|x| x.clamp(0.0, 1.0)))
}

// Differentiable counterparts.

pub fn resize_var(g: &mut Graph, map: Var, height: usize, width: usize) -> Var {
    let (h0, w0) = g.shape(map);
    if (h0, w0) == (height, width) {
        return map;
    }
    let rh = g.constant(resample_matrix(h0, height));
    let rwt = g.constant(resample_matrix(w0, width).transpose());
    let left = g.matmul(rh, map);
    g.matmul(left, rwt)
}

pub fn min_max_var(g: &mut Graph, map: Var) -> Var {
    let (h, w) = g.shape(map);
    let hi = g.max(map);
    let lo = g.min(map);
    if g.scalar(hi) <= g.scalar(lo) {
        return g.constant(Mat::zeros(h, w));
    }
    let range = g.sub(hi, lo);
    let inv = g.recip(range);
    let neg_lo = g.neg(lo);
    let shifted = g.add_scalar_var(map, neg_lo);
    g.mul_scalar_var(shifted, inv)
}

pub fn gaussian_var(g: &mut Graph, map: Var, sigma: f64) -> Var {
    if sigma <= 0.0 {
        return map;
    }
    let (h, w) = g.shape(map);
    let gh = g.constant(gaussian_matrix(h, sigma));
    let gwt = g.constant(gaussian_matrix(w, sigma).transpose());
    let left = g.matmul(gh, map);
    g.matmul(left, gwt)
}

/// Tape version of [`aggregate_maps`]; stage maps are `(M^n_i, M^a_i)` vars.
pub fn aggregate_var(g: &mut Graph, per_stage: &[(Var, Var)], height: usize, width: usize) -> (Var, Var) {
    let mut normal: Option<Var> = None;
    let mut abnormal: Option<Var> = None;
    for &(mn, ma) in per_stage {
        let un = resize_var(g, mn, height, width);
        let ua = resize_var(g, ma, height, width);
        normal = Some(match normal {
            Some(acc) => g.add(acc, un),
            None => un,
        });
        abnormal = Some(match abnormal {
            Some(acc) => g.add(acc, ua),
            None => ua,
        });
    }
    let normal = normal.expect("at least one stage");
    let abnormal = abnormal.expect("at least one stage");
    (min_max_var(g, normal), min_max_var(g, abnormal))
}

pub fn final_map_var(g: &mut Graph, normal: Var, abnormal: Var, sigma: f64) -> Var {
    let diff = g.sub(abnormal, normal);
    let shifted = g.add_const(diff, 1.0);
    let half = g.scale(shifted, 0.5);
    gaussian_var(g, half, sigma)
}
