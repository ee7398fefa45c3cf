//! Batch inference, AUC evaluation and report emission.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::ScoreRecord;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::image_io::{load_mask, save_map_png};
use crate::metrics::roc_auc;
use crate::model::Model;
use crate::prompt::TextFeatures;
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageAucMode {
    /// AUC per class, then the unweighted mean.
    #[default]
    PerClass,
    /// One AUC over all images.
    Pooled,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelAucMode {
    /// All pixels of a class in one ranking.
    #[default]
    Pooled,
    /// Mean of per-image AUCs over images whose mask has both values.
    PerImage,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub image_auc: ImageAucMode,
    pub pixel_auc: PixelAucMode,
}

/// Inference output for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub sample: Sample,
    pub map: Mat,
    pub score: ScoreRecord,
}

/// Predicts every sample; results are in input order. Text features are
/// computed once per class.
pub fn infer_samples(model: &Model, samples: &[Sample]) -> Result<Vec<Scored>> {
    let mut text: BTreeMap<&str, TextFeatures> = BTreeMap::new();
    for s in samples {
        if !text.contains_key(s.class.as_str()) {
            text.insert(&s.class, model.text_features(&s.class)?);
        }
    }
    samples
        .par_iter()
        .map(|s| {
            let feats = model.extract(&model.load_image(&s.image)?)?;
            let p = model.predict_features(&feats, &text[s.class.as_str()])?;
            Ok(Scored { sample: s.clone(), map: p.map, score: p.score.with_label(s.label) })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub count: usize,
    pub anomalous: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub image_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pixel_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub id: String,
    pub class: String,
    #[serde(flatten)]
    pub score: ScoreRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub options: EvalOptions,
    pub image_auc: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pixel_auc: Option<f64>,
    pub classes: BTreeMap<String, ClassMetrics>,
    pub images: Vec<ImageResult>,
    pub config: serde_json::Value,
    pub provenance: BTreeMap<String, String>,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn pixel_auc_for(items: &[&Scored], mode: PixelAucMode) -> Result<Option<f64>> {
    if items.iter().any(|s| s.sample.label && s.sample.mask.is_none()) {
        return Ok(None);
    }
    let masks: Vec<(Mat, &Scored)> = items
        .iter()
        .map(|s| {
            let m = match &s.sample.mask {
                Some(p) => load_mask(p, Some(s.map.shape()))?,
                None => Mat::zeros(s.map.rows(), s.map.cols()),
            };
            Ok((m, *s))
        })
        .collect::<Result<_>>()?;
    match mode {
        PixelAucMode::Pooled => {
            let scores: Vec<f64> = masks.iter().flat_map(|(_, s)| s.map.as_slice().iter().copied()).collect();
            let labels: Vec<bool> = masks.iter().flat_map(|(m, _)| m.as_slice().iter().map(|&v| v > 0.5)).collect();
            match roc_auc(&scores, &labels) {
                Ok(a) => Ok(Some(a)),
                Err(Error::DegenerateLabels) => Ok(None),
                Err(e) => Err(e),
            }
        }
        PixelAucMode::PerImage => {
            let mut aucs = Vec::new();
            for (m, s) in &masks {
                let labels: Vec<bool> = m.as_slice().iter().map(|&v| v > 0.5).collect();
                if let Ok(a) = roc_auc(s.map.as_slice(), &labels) {
                    aucs.push(a);
                }
            }
            Ok(mean(&aucs))
        }
    }
}

/// Image- and pixel-level AUCs of scored samples.
pub fn evaluate(
    scored: &[Scored],
    options: EvalOptions,
    dataset: &str,
    config: serde_json::Value,
) -> Result<EvalReport> {
    let mut by_class: BTreeMap<String, Vec<&Scored>> = BTreeMap::new();
    for s in scored {
        by_class.entry(s.sample.class.clone()).or_default().push(s);
    }
    let mut classes = BTreeMap::new();
    for (class, items) in &by_class {
        let scores: Vec<f64> = items.iter().map(|s| s.score.s_global).collect();
        let labels: Vec<bool> = items.iter().map(|s| s.sample.label).collect();
        let image_auc = match roc_auc(&scores, &labels) {
            Ok(a) => Some(a),
            Err(Error::DegenerateLabels) => None,
            Err(e) => return Err(e),
        };
        classes.insert(
            class.clone(),
            ClassMetrics {
                count: items.len(),
                anomalous: labels.iter().filter(|&&l| l).count(),
                image_auc,
                pixel_auc: pixel_auc_for(items, options.pixel_auc)?,
            },
        );
    }
    let image_auc = match options.image_auc {
        ImageAucMode::PerClass => {
            let per: Vec<f64> = classes.values().filter_map(|c| c.image_auc).collect();
            mean(&per).ok_or(Error::DegenerateLabels)?
        }
        ImageAucMode::Pooled => {
            let scores: Vec<f64> = scored.iter().map(|s| s.score.s_global).collect();
            let labels: Vec<bool> = scored.iter().map(|s| s.sample.label).collect();
            roc_auc(&scores, &labels)?
        }
    };
    let pixel: Vec<f64> = classes.values().filter_map(|c| c.pixel_auc).collect();
    Ok(EvalReport {
        dataset: dataset.to_string(),
        options,
        image_auc,
        pixel_auc: mean(&pixel),
        classes,
        images: scored
            .iter()
            .map(|s| ImageResult { id: s.sample.id.clone(), class: s.sample.class.clone(), score: s.score.clone() })
            .collect(),
        config,
        provenance: BTreeMap::new(),
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Float map file content: size, smoothing and row-major values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapFile {
    pub height: usize,
    pub width: usize,
    pub sigma: f64,
    pub data: Vec<f64>,
}

fn map_stem(id: &str) -> String {
    let trimmed = id.rsplit_once('.').map_or(id, |(stem, _)| stem);
    trimmed.replace(['/', '\\'], "__")
}

/// Writes `metrics.json` and, per scored image, an 8-bit heatmap
/// (`heatmaps/<id>.png`) and its float values (`maps/<id>.json`).
pub fn emit_report(report: &EvalReport, scored: &[Scored], sigma: f64, out_dir: &Path) -> Result<PathBuf> {
    let heat_dir = out_dir.join("heatmaps");
    let map_dir = out_dir.join("maps");
    for d in [out_dir, &heat_dir, &map_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for s in scored {
        let stem = map_stem(&s.sample.id);
        save_map_png(&s.map, &heat_dir.join(format!("{stem}.png")))?;
        let file = MapFile { height: s.map.rows(), width: s.map.cols(), sigma, data: s.map.as_slice().to_vec() };
        let path = map_dir.join(format!("{stem}.json"));
        std::fs::write(&path, serde_json::to_vec(&file).expect("map serializes")).map_err(|e| Error::io(&path, e))?;
    }
    let path = out_dir.join("metrics.json");
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn load_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::SchemaMismatch(e.to_string()))
}

/// Refuses a target that is, contains or lies inside the auxiliary dataset.
pub fn check_overlap(auxiliary: &Path, target: &Path, allow: bool) -> Result<()> {
    if allow {
        return Ok(());
    }
    let canon = |p: &Path| std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let (a, t) = (canon(auxiliary), canon(target));
    if a.starts_with(&t) || t.starts_with(&a) {
        return Err(Error::AuxiliaryOverlap(target.to_path_buf()));
    }
    Ok(())
}
