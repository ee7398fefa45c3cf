//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Graph`] records every operation as a node; [`Graph::backward`] walks
//! the nodes in reverse creation order, which is a valid topological order
//! because a node can only reference earlier nodes. Shape errors inside the
//! tape are programming errors and panic; public model entry points validate
//! shapes before building a graph.

use crate::fusion::sampling::bilinear_taps;
use crate::tensor::{gelu, gelu_grad, layer_norm_rows, softmax_rows, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddScalarVar(Var, Var),
    MulScalarVar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    SoftmaxRows(Var),
    Relu(Var),
    Gelu(Var),
    LayerNormRows { input: Var, inv_std: Vec<f64> },
    L2NormalizeRows { input: Var, norms: Vec<f64> },
    SumAll(Var),
    MeanAll(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Recip(Var),
    PowConst(Var, f64),
    Clamp(Var, f64, f64),
    Extremum { input: Var, index: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Reshape(Var),
    BilinearSample { grid: Var, points: Var, height: usize, width: usize, samples_per_row: usize },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Operation tape. Build values with the methods below, then call
/// [`Graph::backward`] on a scalar (1×1) node.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; `None` for nodes that do not influence the
/// loss or do not require gradients.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.constant(Mat::filled(1, 1, value))
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on a non-scalar node");
        m[(0, 0)]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn unary(&mut self, value: Mat, op: Op, input: Var) -> Var {
        let needs = self.needs(input);
        self.push(value, op, needs)
    }

    fn binary(&mut self, value: Mat, op: Op, a: Var, b: Var) -> Var {
        let needs = self.needs(a) || self.needs(b);
        self.push(value, op, needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b)).expect("matmul shape");
        self.binary(value, Op::MatMul(a, b), a, b)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.unary(value, Op::Transpose(a), a)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b)).expect("add shape");
        self.binary(value, Op::Add(a, b), a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b)).expect("sub shape");
        self.binary(value, Op::Sub(a, b), a, b)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y).expect("mul shape");
        self.binary(value, Op::Mul(a, b), a, b)
    }

    /// Adds a 1×C row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).rows(), 1, "add_row expects a row vector");
        let value = self.value(a).add_row_broadcast(self.value(row).as_slice()).expect("add_row shape");
        self.binary(value, Op::AddRow(a, row), a, row)
    }

    /// Multiplies every row of `a` element-wise by a 1×C row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.shape(), (1, self.value(a).cols()), "mul_row shape");
        let mut value = self.value(a).clone();
        let rv = r.as_slice().to_vec();
        for i in 0..value.rows() {
            for (x, s) in value.row_mut(i).iter_mut().zip(&rv) {
                *x *= s;
            }
        }
        self.binary(value, Op::MulRow(a, row), a, row)
    }

    /// `a + s` for a 1×1 node `s`.
    pub fn add_scalar_var(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let value = self.value(a).map(|x| x + sv);
        self.binary(value, Op::AddScalarVar(a, s), a, s)
    }

    /// `a · s` for a 1×1 node `s`.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let value = self.value(a).scale(sv);
        self.binary(value, Op::MulScalarVar(a, s), a, s)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.unary(value, Op::Scale(a, c), a)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.unary(value, Op::AddConst(a), a)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `c - a` element-wise.
    pub fn rsub_const(&mut self, c: f64, a: Var) -> Var {
        let n = self.neg(a);
        self.add_const(n, c)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.unary(value, Op::SoftmaxRows(a), a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.unary(value, Op::Relu(a), a)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        self.unary(value, Op::Gelu(a), a)
    }

    /// Per-row layer normalization without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let (value, inv_std) = layer_norm_rows(self.value(a), eps);
        self.unary(value, Op::LayerNormRows { input: a, inv_std }, a)
    }

    /// Layer normalization followed by per-column gain and bias.
    pub fn layer_norm_affine(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let n = self.layer_norm_rows(a, eps);
        let scaled = self.mul_row(n, gain);
        self.add_row(scaled, bias)
    }

    /// Scales each row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        let mut norms = Vec::with_capacity(value.rows());
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in row.iter_mut() {
                *x /= norm;
            }
            norms.push(norm);
        }
        self.unary(value, Op::L2NormalizeRows { input: a, norms }, a)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Mat::filled(1, 1, self.value(a).sum());
        self.unary(value, Op::SumAll(a), a)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = Mat::filled(1, 1, m.sum() / m.len() as f64);
        self.unary(value, Op::MeanAll(a), a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.unary(value, Op::Exp(a), a)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.unary(value, Op::Ln(a), a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::sqrt);
        self.unary(value, Op::Sqrt(a), a)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::recip);
        self.unary(value, Op::Recip(a), a)
    }

    pub fn pow_const(&mut self, a: Var, p: f64) -> Var {
        let value = self.value(a).map(|x| x.powf(p));
        self.unary(value, Op::PowConst(a, p), a)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        self.unary(value, Op::Clamp(a, lo, hi), a)
    }

    /// Maximum entry (first occurrence wins ties).
    pub fn max(&mut self, a: Var) -> Var {
        self.extremum(a, |x, best| x > best)
    }

    /// Minimum entry (first occurrence wins ties).
    pub fn min(&mut self, a: Var) -> Var {
        self.extremum(a, |x, best| x < best)
    }

    fn extremum(&mut self, a: Var, better: impl Fn(f64, f64) -> bool) -> Var {
        let data = self.value(a).as_slice();
        let mut index = 0;
        for (i, &x) in data.iter().enumerate() {
            if better(x, data[index]) {
                index = i;
            }
        }
        let value = Mat::filled(1, 1, data[index]);
        self.unary(value, Op::Extremum { input: a, index }, a)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Mat::concat_rows(&mats).expect("concat_rows shape");
        let needs = parts.iter().any(|&v| self.needs(v));
        self.push(value, Op::ConcatRows(parts.to_vec()), needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Mat::concat_cols(&mats).expect("concat_cols shape");
        let needs = parts.iter().any(|&v| self.needs(v));
        self.push(value, Op::ConcatCols(parts.to_vec()), needs)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice_rows(start, end);
        self.unary(value, Op::SliceRows(a, start), a)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice_cols(start, end);
        self.unary(value, Op::SliceCols(a, start), a)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self.value(a).clone().reshape(rows, cols).expect("reshape size");
        self.unary(value, Op::Reshape(a), a)
    }

    /// Samples a `height × width` grid (stored as `(height·width) × C`) at
    /// continuous points. `points` is `R × 2k`: row `r` holds `k` `(y, x)`
    /// pairs; output row `r·k + j` is the sample at pair `j` of row `r`.
    pub fn bilinear_sample(&mut self, grid: Var, points: Var, height: usize, width: usize) -> Var {
        let g = self.value(grid);
        let p = self.value(points);
        assert_eq!(g.rows(), height * width, "bilinear grid rows");
        assert!(p.cols() >= 2 && p.cols().is_multiple_of(2), "points must hold (y, x) pairs");
        let k = p.cols() / 2;
        let c = g.cols();
        let mut value = Mat::zeros(p.rows() * k, c);
        for r in 0..p.rows() {
            for j in 0..k {
                let taps = bilinear_taps(height, width, p[(r, 2 * j)], p[(r, 2 * j + 1)]);
                let out = value.row_mut(r * k + j);
                for tap in taps.iter() {
                    if tap.weight == 0.0 {
                        continue;
                    }
                    for (o, &x) in out.iter_mut().zip(g.row(tap.index)) {
                        *o += tap.weight * x;
                    }
                }
            }
        }
        self.binary(value, Op::BilinearSample { grid, points, height, width, samples_per_row: k }, grid, points)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Mat>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Mat::filled(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut acc = |v: Var, delta: Mat| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    acc(*a, g.matmul_bt(bv));
                }
                if self.needs(*b) {
                    acc(*b, av.matmul_at(g));
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    acc(*a, g.zip_map(bv, |x, y| x * y).unwrap());
                }
                if self.needs(*b) {
                    acc(*b, g.zip_map(av, |x, y| x * y).unwrap());
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if self.needs(*row) {
                    acc(*row, column_sums(g));
                }
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (self.value(*a), self.value(*row));
                if self.needs(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        for (x, s) in ga.row_mut(r).iter_mut().zip(rv.as_slice()) {
                            *x *= s;
                        }
                    }
                    acc(*a, ga);
                }
                if self.needs(*row) {
                    acc(*row, column_sums(&g.zip_map(av, |x, y| x * y).unwrap()));
                }
            }
            Op::AddScalarVar(a, s) => {
                acc(*a, g.clone());
                acc(*s, Mat::filled(1, 1, g.sum()));
            }
            Op::MulScalarVar(a, s) => {
                let sv = self.scalar(*s);
                if self.needs(*a) {
                    acc(*a, g.scale(sv));
                }
                if self.needs(*s) {
                    let av = self.value(*a);
                    acc(*s, Mat::filled(1, 1, g.zip_map(av, |x, y| x * y).unwrap().sum()));
                }
            }
            Op::Scale(a, c) => acc(*a, g.scale(*c)),
            Op::AddConst(a) => acc(*a, g.clone()),
            Op::SoftmaxRows(a) => {
                let mut ga = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let inner: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((o, &p), &q) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = p * (q - inner);
                    }
                }
                acc(*a, ga);
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                acc(*a, g.zip_map(av, |q, x| if x > 0.0 { q } else { 0.0 }).unwrap());
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                acc(*a, g.zip_map(av, |q, x| q * gelu_grad(x)).unwrap());
            }
            Op::LayerNormRows { input, inv_std } => {
                let n = y.cols() as f64;
                let mut ga = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let xhat = y.row(r);
                    let gr = g.row(r);
                    let sum_g: f64 = gr.iter().sum();
                    let sum_gx: f64 = gr.iter().zip(xhat).map(|(q, x)| q * x).sum();
                    for ((o, &q), &x) in ga.row_mut(r).iter_mut().zip(gr).zip(xhat) {
                        *o = inv_std[r] / n * (n * q - sum_g - x * sum_gx);
                    }
                }
                acc(*input, ga);
            }
            Op::L2NormalizeRows { input, norms } => {
                let mut ga = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let inner: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((o, &p), &q) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = (q - p * inner) / norms[r];
                    }
                }
                acc(*input, ga);
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Mat::filled(r, c, g[(0, 0)]));
            }
            Op::MeanAll(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Mat::filled(r, c, g[(0, 0)] / (r * c) as f64));
            }
            Op::Exp(a) => acc(*a, g.zip_map(y, |q, e| q * e).unwrap()),
            Op::Ln(a) => {
                let av = self.value(*a);
                acc(*a, g.zip_map(av, |q, x| q / x).unwrap());
            }
            Op::Sqrt(a) => acc(*a, g.zip_map(y, |q, s| q / (2.0 * s)).unwrap()),
            Op::Recip(a) => acc(*a, g.zip_map(y, |q, r| -q * r * r).unwrap()),
            Op::PowConst(a, p) => {
                let av = self.value(*a);
                acc(*a, g.zip_map(av, |q, x| q * p * x.powf(p - 1.0)).unwrap());
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.value(*a);
                acc(*a, g.zip_map(av, |q, x| if x > *lo && x < *hi { q } else { 0.0 }).unwrap());
            }
            Op::Extremum { input, index } => {
                let (r, c) = self.shape(*input);
                let mut ga = Mat::zeros(r, c);
                ga.as_mut_slice()[*index] = g[(0, 0)];
                acc(*input, ga);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    acc(p, g.slice_rows(start, start + rows));
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    acc(p, g.slice_cols(start, start + cols));
                    start += cols;
                }
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.shape(*a);
                let mut ga = Mat::zeros(r, c);
                let off = start * c;
                ga.as_mut_slice()[off..off + g.len()].copy_from_slice(g.as_slice());
                acc(*a, ga);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.shape(*a);
                let mut ga = Mat::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                acc(*a, ga);
            }
            Op::Reshape(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, g.clone().reshape(r, c).unwrap());
            }
            Op::BilinearSample { grid, points, height, width, samples_per_row } => {
                let gv = self.value(*grid);
                let pv = self.value(*points);
                let k = *samples_per_row;
                let mut g_grid = Mat::zeros(gv.rows(), gv.cols());
                let mut g_points = Mat::zeros(pv.rows(), pv.cols());
                for r in 0..pv.rows() {
                    for j in 0..k {
                        let taps = bilinear_taps(*height, *width, pv[(r, 2 * j)], pv[(r, 2 * j + 1)]);
                        let go = g.row(r * k + j);
                        let mut dy = 0.0;
                        let mut dx = 0.0;
                        for tap in taps.iter() {
                            let feat = gv.row(tap.index);
                            let proj: f64 = go.iter().zip(feat).map(|(a, b)| a * b).sum();
                            dy += tap.d_dy * proj;
                            dx += tap.d_dx * proj;
                            if tap.weight != 0.0 {
                                for (o, &q) in g_grid.row_mut(tap.index).iter_mut().zip(go) {
                                    *o += tap.weight * q;
                                }
                            }
                        }
                        g_points[(r, 2 * j)] = dy;
                        g_points[(r, 2 * j + 1)] = dx;
                    }
                }
                acc(*grid, g_grid);
                acc(*points, g_points);
            }
        }
    }
}

fn column_sums(m: &Mat) -> Mat {
    let mut out = Mat::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, &x) in out.as_mut_slice().iter_mut().zip(m.row(r)) {
            *o += x;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of every parameter leaf of `build`.
    fn check(inputs: Vec<Mat>, build: impl Fn(&mut Graph, &[Var]) -> Var, tol: f64) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().cloned().map(|m| g.param(m)).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss);
        let h = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Mat::zeros(input.rows(), input.cols()));
            for idx in 0..input.len() {
                let eval = |delta: f64| {
                    let mut g2 = Graph::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, m)| {
                            let mut m = m.clone();
                            if j == k {
                                m.as_mut_slice()[idx] += delta;
                            }
                            g2.param(m)
                        })
                        .collect();
                    let l = build(&mut g2, &vs);
                    g2.scalar(l)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = analytic.as_slice()[idx];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                assert!(err < tol, "input {k} idx {idx}: fd {fd} analytic {an}");
            }
        }
    }

    fn rand_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        Mat::randn(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn matmul_softmax_layernorm_chain() {
        check(
            vec![rand_mat(3, 4, 1), rand_mat(4, 5, 2), rand_mat(1, 5, 3)],
            |g, v| {
                let m = g.matmul(v[0], v[1]);
                let m = g.add_row(m, v[2]);
                let s = g.softmax_rows(m);
                let n = g.layer_norm_rows(s, 1e-5);
                let w = g.constant(rand_mat(3, 5, 9));
                let p = g.mul(n, w);
                g.sum(p)
            },
            1e-5,
        );
    }

    #[test]
    fn normalize_gelu_transpose_concat() {
        check(
            vec![rand_mat(2, 3, 4), rand_mat(2, 3, 5)],
            |g, v| {
                let a = g.l2_normalize_rows(v[0]);
                let b = g.gelu(v[1]);
                let c = g.concat_cols(&[a, b]);
                let t = g.transpose(c);
                let r = g.concat_rows(&[t, t]);
                let s = g.slice_rows(r, 1, 5);
                let s = g.slice_cols(s, 0, 1);
                let q = g.mul(s, s);
                g.mean(q)
            },
            1e-5,
        );
    }

    #[test]
    fn scalar_broadcast_and_extrema() {
        check(
            vec![rand_mat(3, 3, 6)],
            |g, v| {
                let mx = g.max(v[0]);
                let mn = g.min(v[0]);
                let range = g.sub(mx, mn);
                let inv = g.recip(range);
                let neg_min = g.neg(mn);
                let shifted = g.add_scalar_var(v[0], neg_min);
                let norm = g.mul_scalar_var(shifted, inv);
                let w = g.constant(rand_mat(3, 3, 10));
                let p = g.mul(norm, w);
                g.sum(p)
            },
            1e-5,
        );
    }

    #[test]
    fn pointwise_functions() {
        let positive = rand_mat(2, 2, 7).map(|x| x.abs() + 0.5);
        check(
            vec![positive],
            |g, v| {
                let a = g.ln(v[0]);
                let b = g.exp(v[0]);
                let c = g.sqrt(v[0]);
                let d = g.pow_const(v[0], 2.5);
                let e = g.clamp(v[0], 0.0, 100.0);
                let f = g.relu(v[0]);
                let s = [a, b, c, d, e, f].into_iter().reduce(|x, y| g.add(x, y)).unwrap();
                let s = g.rsub_const(3.0, s);
                let s = g.mul(s, s);
                g.sum(s)
            },
            1e-5,
        );
    }

    #[test]
    fn mul_row_and_reshape() {
        check(
            vec![rand_mat(3, 2, 11), rand_mat(1, 2, 12)],
            |g, v| {
                let m = g.mul_row(v[0], v[1]);
                let r = g.reshape(m, 2, 3);
                let w = g.constant(rand_mat(2, 3, 13));
                let p = g.mul(r, w);
                g.sum(p)
            },
            1e-5,
        );
    }

    #[test]
    fn bilinear_sample_gradients_off_grid() {
        let points = Mat::from_rows(&[vec![0.3, 0.7, 1.2, 0.4], vec![1.6, 1.1, 0.45, 1.9]]).unwrap();
        check(
            vec![rand_mat(9, 3, 14), points],
            |g, v| {
                let s = g.bilinear_sample(v[0], v[1], 3, 3);
                let w = g.constant(rand_mat(4, 3, 15));
                let p = g.mul(s, w);
                g.sum(p)
            },
            1e-5,
        );
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.param(Mat::filled(1, 1, 2.0));
        let c = g.constant(Mat::filled(1, 1, 3.0));
        let p = g.mul(a, c);
        let grads = g.backward(p);
        assert_eq!(grads.get(a).unwrap()[(0, 0)], 3.0);
        assert!(grads.get(c).is_none());
    }
}
