//! Joint training of the prompt bank, fusion head and adapter on an
//! auxiliary dataset, and the checkpoint format.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::data::{Layout, Sample};
use crate::error::{Error, Result};
use crate::image_io::load_mask;
use crate::kb::{knowledge_mean, KnowledgeBase};
use crate::losses::{bce_var, local_var, LossWeights};
use crate::model::{ImageFeatures, Model, ModelConfig};
use crate::optim::{clip_global_norm, Adam, AdamConfig};
use crate::params::{Binder, ParamStore, TrainableSet};
use crate::prompt::kd_loss_var;
use crate::tensor::Mat;
use crate::text::TextEncoder;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub root: PathBuf,
    #[serde(default)]
    pub layout: Layout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub auxiliary: Option<DatasetRef>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub grad_clip: f64,
    /// Stops after this many optimizer steps when set.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub trainable: TrainableSet,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            auxiliary: None,
            epochs: 5,
            batch_size: 8,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            grad_clip: 1.0,
            max_steps: None,
            seed: 0,
            loss_weights: LossWeights::default(),
            trainable: TrainableSet::ALL,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive; decay and clip non-negative".into()));
        }
        self.loss_weights.validate()
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub l_kd: f64,
    pub l_global: f64,
    pub l_local: f64,
    pub l_total: f64,
}

pub fn write_log(rows: &[LogRow], path: &Path) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    r.deserialize().map(|row| row.map_err(|e| Error::SchemaMismatch(e.to_string()))).collect()
}

/// Training data with frozen-encoder features precomputed.
pub struct CachedSample {
    pub class: String,
    pub label: bool,
    pub features: ImageFeatures,
    /// Ground-truth mask at the output map size (zeros for normal images).
    pub mask: Mat,
}

pub fn cache_samples(model: &Model, samples: &[Sample]) -> Result<Vec<CachedSample>> {
    let (h, w) = model.map_size();
    samples
        .par_iter()
        .map(|s| {
            let features = model.extract(&model.load_image(&s.image)?)?;
            let mask = match &s.mask {
                Some(p) => load_mask(p, Some((h, w)))?,
                None if s.label => return Err(Error::MissingMask(s.image.clone())),
                None => Mat::zeros(h, w),
            };
            let has_defect = mask.max() > 0.5;
            if has_defect && !s.label {
                return Err(Error::LayoutViolation(format!("normal sample {} has a non-empty mask", s.id)));
            }
            Ok(CachedSample { class: s.class.clone(), label: s.label, features, mask })
        })
        .collect()
}

/// Knowledge means `w̄^k` per class, encoded with the model's text encoder.
pub fn knowledge_means(model: &Model, kb: &KnowledgeBase, classes: &[String]) -> Result<BTreeMap<String, Vec<f64>>> {
    classes.iter().map(|c| Ok((c.clone(), knowledge_mean(kb, c, &|t| model.text.encode_text(t))?))).collect()
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

struct StepLosses {
    kd: Var,
    global: Var,
    local: Var,
    total: Var,
}

fn batch_losses(
    model: &Model,
    g: &mut Graph,
    binder: &mut Binder<'_>,
    batch: &[&CachedSample],
    knowledge: &BTreeMap<String, Vec<f64>>,
    weights: &LossWeights,
) -> Result<StepLosses> {
    let mut text = BTreeMap::new();
    for s in batch {
        if !text.contains_key(&s.class) {
            let vars = model.text_vars(g, binder, &s.class)?;
            text.insert(s.class.clone(), vars);
        }
    }
    let n = batch.len() as f64;
    let zero = g.scalar_constant(0.0);
    let (mut kd, mut global, mut local) = (zero, zero, zero);
    for s in batch {
        let tv = text[&s.class];
        if weights.alpha > 0.0 {
            let k = knowledge.get(&s.class).ok_or_else(|| Error::UnknownClass(s.class.clone()))?;
            let kv = g.constant(Mat::row_vector(k));
            let l = kd_loss_var(g, kv, tv.normal_mean, tv.abnormal_mean);
            kd = g.add(kd, l);
        }
        if weights.beta > 0.0 || weights.gamma > 0.0 {
            let f = model.forward_var(g, binder, &s.features, tv.text);
            let sum = g.add(f.abnormal_prob, f.map_max);
            let score = g.scale(sum, 0.5);
            let b = bce_var(g, score, s.label);
            global = g.add(global, b);
            let l = local_var(g, f.abnormal, f.normal, &s.mask);
            local = g.add(local, l);
        }
    }
    let kd = g.scale(kd, 1.0 / n);
    let global = g.scale(global, 1.0 / n);
    let local = g.scale(local, 1.0 / n);
    let a = g.scale(kd, weights.alpha);
    let b = g.scale(global, weights.beta);
    let c = g.scale(local, weights.gamma);
    let ab = g.add(a, b);
    let total = g.add(ab, c);
    Ok(StepLosses { kd, global, local, total })
}

/// Runs `epochs × batches` of Adam updates on the trainable groups.
pub fn train_cached(
    model: &mut Model,
    data: &[CachedSample],
    knowledge: &BTreeMap<String, Vec<f64>>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::DatasetEmpty("auxiliary dataset has no samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::new(AdamConfig {
        learning_rate: config.learning_rate,
        weight_decay: config.weight_decay,
        ..AdamConfig::default()
    });
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::new();
    let mut step = 0;
    'epochs: for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if config.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let batch: Vec<&CachedSample> = chunk.iter().map(|&i| &data[i]).collect();
            let mut g = Graph::new();
            let grads = {
                let mut binder = Binder::new(&model.params, config.trainable);
                let losses = batch_losses(model, &mut g, &mut binder, &batch, knowledge, &config.loss_weights)?;
                let row = LogRow {
                    step,
                    l_kd: g.scalar(losses.kd),
                    l_global: g.scalar(losses.global),
                    l_local: g.scalar(losses.local),
                    l_total: g.scalar(losses.total),
                };
                if ![row.l_kd, row.l_global, row.l_local, row.l_total].iter().all(|v| v.is_finite()) {
                    log::error!("non-finite loss at step {step}: {row:?}");
                    return Err(Error::NonFiniteLoss(format!("step {step}: {row:?}")));
                }
                log::debug!("step {step}: {row:?}");
                log.push(row);
                if config.trainable.is_empty() {
                    None
                } else {
                    Some(binder.collect(&g.backward(losses.total)))
                }
            };
            if let Some(mut grads) = grads {
                if config.grad_clip > 0.0 {
                    clip_global_norm(&mut grads, config.grad_clip);
                }
                opt.step(&mut model.params, &grads);
            }
            step += 1;
        }
    }
    let checkpoint = Checkpoint::new(model.params.clone(), model.config.clone(), Some(config.clone()), step as u64);
    Ok(TrainOutcome { checkpoint, log })
}

/// Extracts features for `samples`, derives knowledge means from `kb` and trains.
pub fn train(model: &mut Model, kb: &KnowledgeBase, samples: &[Sample], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::DatasetEmpty("auxiliary dataset has no samples".into()));
    }
    let data = cache_samples(model, samples)?;
    let knowledge = if config.loss_weights.alpha > 0.0 {
        knowledge_means(model, kb, &crate::data::classes(samples))?
    } else {
        BTreeMap::new()
    };
    train_cached(model, &data, &knowledge, config)
}

const MAGIC: &[u8; 10] = b"KANOCKPT1\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    step: u64,
    model: ModelConfig,
    train: Option<TrainConfig>,
    tensors: Vec<TensorEntry>,
    hash: String,
}

/// Learnable parameters with the configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub step: u64,
    /// Hex SHA-256 over the configuration, tensor layout and raw data.
    pub hash: String,
}

fn raw_data(params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(params.scalar_count() * 8);
    for (_, m) in params.iter() {
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn entries(params: &ParamStore) -> Vec<TensorEntry> {
    params.iter().map(|(n, m)| TensorEntry { name: n.clone(), shape: [m.rows(), m.cols()] }).collect()
}

fn content_hash(
    step: u64,
    model: &ModelConfig,
    train: &Option<TrainConfig>,
    tensors: &[TensorEntry],
    data: &[u8],
) -> String {
    let header = serde_json::to_vec(&(step, model, train, tensors)).expect("checkpoint header serializes");
    let mut h = Sha256::new();
    h.update((header.len() as u64).to_le_bytes());
    h.update(&header);
    h.update(data);
    hex::encode(h.finalize())
}

impl Checkpoint {
    pub fn new(params: ParamStore, model: ModelConfig, train: Option<TrainConfig>, step: u64) -> Self {
        let hash = content_hash(step, &model, &train, &entries(&params), &raw_data(&params));
        Self { params, model, train, step, hash }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            step: self.step,
            model: self.model.clone(),
            train: self.train.clone(),
            tensors: entries(&self.params),
            hash: self.hash.clone(),
        };
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&raw_data(&self.params));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::WeightLoadFailure("not a checkpoint file".into()));
        }
        let corrupt = |what: &str| Error::HashMismatch(format!("checkpoint is truncated or corrupt ({what})"));
        let rest = &bytes[MAGIC.len()..];
        if rest.len() < 8 {
            return Err(corrupt("header"));
        }
        let len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
        let rest = &rest[8..];
        if rest.len() < len {
            return Err(corrupt("manifest"));
        }
        let manifest: Manifest = serde_json::from_slice(&rest[..len]).map_err(|_| corrupt("manifest"))?;
        let data = &rest[len..];
        let expected: usize = manifest.tensors.iter().map(|t| t.shape[0] * t.shape[1] * 8).sum();
        if data.len() != expected {
            return Err(corrupt("data length"));
        }
        let hash = content_hash(manifest.step, &manifest.model, &manifest.train, &manifest.tensors, data);
        if hash != manifest.hash {
            return Err(Error::HashMismatch(format!("stored {} but content hashes to {hash}", manifest.hash)));
        }
        let mut params = ParamStore::new();
        let mut offset = 0;
        for t in &manifest.tensors {
            let n = t.shape[0] * t.shape[1];
            let values = data[offset..offset + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            offset += 8 * n;
            params.insert(t.name.clone(), Mat::from_vec(t.shape[0], t.shape[1], values)?);
        }
        Ok(Self { params, model: manifest.model, train: manifest.train, step: manifest.step, hash })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn into_model(self) -> Result<Model> {
        Model::with_params(self.model, self.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkpoint() -> Checkpoint {
        let model = Model::new(ModelConfig::tiny(0), 1).unwrap();
        Checkpoint::new(model.params.clone(), model.config.clone(), Some(TrainConfig::default()), 7)
    }

    #[test]
    fn bytes_round_trip() {
        let c = checkpoint();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.train, Some(TrainConfig::default()));
    }

    #[test]
    fn truncation_and_tampering_detected() {
        let bytes = checkpoint().to_bytes();
        for cut in [bytes.len() - 1, bytes.len() - 8, 20, 12] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::HashMismatch(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        let last = flipped.len() - 3;
        flipped[last] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::HashMismatch(_))));
        assert!(matches!(Checkpoint::from_bytes(b"nope"), Err(Error::WeightLoadFailure(_))));
    }

    #[test]
    fn train_config_validation() {
        let bad = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        let bad = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn empty_dataset() {
        let mut model = Model::new(ModelConfig::tiny(0), 1).unwrap();
        let err = train_cached(&mut model, &[], &BTreeMap::new(), &TrainConfig::default());
        assert!(matches!(err, Err(Error::DatasetEmpty(_))));
    }
}
