#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use kanoclip::autograd::{Graph, Var};
use kanoclip::client::{FixtureClient, ImageRef};
use kanoclip::data::{load_dataset, make_synthetic_dataset, Layout, Sample, SynthConfig};
use kanoclip::kb::{build_kb, KnowledgeBase, PromptTemplateConfig};
use kanoclip::params::{Binder, ParamStore, TrainableSet};
use kanoclip::transformer::TransformerBlock;
use kanoclip::Mat;

pub const FD_STEP: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-6;

pub fn fixture_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/kb_fixture.json")
}

/// Triple-loop `softmax(Q·Kᵀ·scale)·V`.
pub fn naive_attention(q: &Mat, k: &Mat, v: &Mat, scale: f64) -> Mat {
    let mut out = Mat::zeros(q.rows(), v.cols());
    for i in 0..q.rows() {
        let mut logits = vec![0.0; k.rows()];
        for j in 0..k.rows() {
            let mut s = 0.0;
            for c in 0..q.cols() {
                s += q[(i, c)] * k[(j, c)];
            }
            logits[j] = s * scale;
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..k.rows() {
            for c in 0..v.cols() {
                out[(i, c)] += e[j] / z * v[(j, c)];
            }
        }
    }
    out
}

fn naive_affine(x: &Mat, w: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(x.rows(), w.cols());
    for i in 0..x.rows() {
        for j in 0..w.cols() {
            let mut s = b[(0, j)];
            for k in 0..x.cols() {
                s += x[(i, k)] * w[(k, j)];
            }
            out[(i, j)] = s;
        }
    }
    out
}

fn naive_layer_norm(x: &Mat, gain: &Mat, bias: &Mat, eps: f64) -> Mat {
    let mut out = Mat::zeros(x.rows(), x.cols());
    let n = x.cols() as f64;
    for i in 0..x.rows() {
        let mean = (0..x.cols()).map(|j| x[(i, j)]).sum::<f64>() / n;
        let var = (0..x.cols()).map(|j| (x[(i, j)] - mean).powi(2)).sum::<f64>() / n;
        for j in 0..x.cols() {
            out[(i, j)] = (x[(i, j)] - mean) / (var + eps).sqrt() * gain[(0, j)] + bias[(0, j)];
        }
    }
    out
}

/// Local stream update `L + Project(concat_h Attention(V_h, V_h, V_h))`
/// with `V = LN1(X)·W_v + b_v`, computed loop by loop.
pub fn naive_vv_local(original: &Mat, local: &Mat, block: &TransformerBlock) -> Mat {
    let a = &block.attn;
    let h = naive_layer_norm(original, &block.ln1_gain, &block.ln1_bias, 1e-5);
    let v = naive_affine(&h, &a.w_v, &a.b_v);
    let hw = v.cols() / a.heads;
    let mut attended = Mat::zeros(v.rows(), v.cols());
    for head in 0..a.heads {
        let vh = v.slice_cols(head * hw, (head + 1) * hw);
        let o = naive_attention(&vh, &vh, &vh, 1.0 / (hw as f64).sqrt());
        for i in 0..o.rows() {
            for j in 0..hw {
                attended[(i, head * hw + j)] = o[(i, j)];
            }
        }
    }
    let proj = naive_affine(&attended, &a.project, &a.project_bias);
    local.add(&proj).unwrap()
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counting half.
pub fn pair_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut good, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                good += 1.0;
            } else if si == sj {
                good += 0.5;
            }
        }
    }
    good / pairs
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Largest relative error between tape gradients of `f` w.r.t. every entry
/// of `inputs` and central differences.
pub fn grad_check_inputs(inputs: &[Mat], f: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let eval = |values: &[Mat]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|m| g.param(m.clone())).collect();
        let out = f(&mut g, &vars);
        g.scalar(out)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.param(m.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let mut worst: f64 = 0.0;
    for (idx, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[idx]).cloned().unwrap_or_else(|| Mat::zeros(input.rows(), input.cols()));
        for e in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[idx].as_mut_slice()[e] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[idx].as_mut_slice()[e] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.as_slice()[e], numeric));
        }
    }
    worst
}

/// Same check for store parameters bound through a [`Binder`]; only the
/// listed `(name, index)` entries are perturbed.
pub fn grad_check_store(
    store: &ParamStore,
    entries: &[(String, usize)],
    f: &dyn Fn(&mut Graph, &mut Binder<'_>) -> Var,
) -> f64 {
    let eval = |s: &ParamStore| {
        let mut g = Graph::new();
        let mut b = Binder::new(s, TrainableSet::NONE);
        let out = f(&mut g, &mut b);
        g.scalar(out)
    };
    let mut g = Graph::new();
    let mut binder = Binder::new(store, TrainableSet::ALL);
    let out = f(&mut g, &mut binder);
    let grads = binder.collect(&g.backward(out));
    let mut worst: f64 = 0.0;
    for (name, e) in entries {
        let analytic = grads.get(name).map_or(0.0, |m| m.as_slice()[*e]);
        let mut plus = store.clone();
        plus.get_mut(name).unwrap().as_mut_slice()[*e] += FD_STEP;
        let mut minus = store.clone();
        minus.get_mut(name).unwrap().as_mut_slice()[*e] -= FD_STEP;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic, numeric));
    }
    worst
}

/// Fixture knowledge base over the anomalous images of `samples`.
pub fn fixture_kb(samples: &[Sample]) -> KnowledgeBase {
    let client = FixtureClient::from_file(&fixture_path()).unwrap();
    let mut images: BTreeMap<String, Vec<ImageRef>> = BTreeMap::new();
    for s in samples {
        let entry = images.entry(s.class.clone()).or_default();
        if s.label {
            entry.push(ImageRef::new(s.id.clone(), s.image.clone()));
        }
    }
    build_kb(&client, &PromptTemplateConfig::default(), &images).unwrap()
}

/// Auxiliary ("carpet") and target ("tile") synthetic sets for one seed.
pub struct SynthPair {
    pub dir: tempfile::TempDir,
    pub auxiliary: Vec<Sample>,
    pub target: Vec<Sample>,
}

pub fn synth_pair(seed: u64, aux_count: usize, target_count: usize) -> SynthPair {
    let dir = tempfile::tempdir().unwrap();
    let aux = dir.path().join("aux");
    let tgt = dir.path().join("target");
    make_synthetic_dataset(&aux, &SynthConfig::new("carpet", aux_count, 1000 + seed)).unwrap();
    make_synthetic_dataset(&tgt, &SynthConfig::new("tile", target_count, 2000 + seed)).unwrap();
    let auxiliary = load_dataset(&aux, Layout::Mvtec).unwrap();
    let target = load_dataset(&tgt, Layout::Mvtec).unwrap();
    SynthPair { dir, auxiliary, target }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
