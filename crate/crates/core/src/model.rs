//! End-to-end model: frozen encoders plus the learnable prompt bank, fusion
//! head and adapter.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::{adapt_var, score_var, AdapterConfig, AdapterParams, ScoreRecord};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::fusion::maps::{aggregate_var, final_map_var};
use crate::fusion::{Fusion, FusionConfig, STAGE_COUNT};
use crate::image_io::{load_preprocessed, PixelImage};
use crate::params::{Binder, ParamStore, TrainableSet};
use crate::prompt::{encode_prompts_var, LearnablePromptBank, PromptConfig, TextFeatureVars, TextFeatures};
use crate::tensor::Mat;
use crate::text::{TextEncoder, TextEncoderConfig, TinyTextEncoder};
use crate::vision::{PatchFeaturePyramid, PatchSource, VisionConfig, VisionEncoder};

/// Where the frozen encoder weights come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backbone {
    /// Randomly initialized encoders drawn from `seed`.
    Random { seed: u64, vision: VisionConfig, text: TextEncoderConfig },
    /// Tensor directories written by `VisionEncoder::save` / `TinyTextEncoder::save`.
    Weights { vision_dir: PathBuf, text_dir: PathBuf },
}

impl Backbone {
    pub fn tiny(seed: u64) -> Self {
        Backbone::Random { seed, vision: VisionConfig::tiny(), text: TextEncoderConfig::tiny() }
    }

    pub fn load(&self) -> Result<(VisionEncoder, TinyTextEncoder)> {
        match self {
            Backbone::Random { seed, vision, text } => Ok((
                VisionEncoder::random(vision.clone(), *seed)?,
                TinyTextEncoder::random(text.clone(), seed.wrapping_add(1))?,
            )),
            Backbone::Weights { vision_dir, text_dir } => {
                Ok((VisionEncoder::load(vision_dir)?, TinyTextEncoder::load(text_dir)?))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub prompt: PromptConfig,
    pub adapter: AdapterConfig,
    /// Gaussian smoothing of the final map, in output-grid pixels.
    pub sigma: f64,
    pub tau: f64,
    /// Output map size; `None` uses the input image resolution.
    pub map_size: Option<[usize; 2]>,
    pub patch_source: PatchSource,
    /// Scores projected patches against the text rows directly,
    /// skipping every attention block of the fusion head.
    pub plain_cosine_maps: bool,
    pub sample_points: Option<usize>,
}

impl ModelConfig {
    pub fn tiny(backbone_seed: u64) -> Self {
        Self {
            backbone: Backbone::tiny(backbone_seed),
            prompt: PromptConfig::default(),
            adapter: AdapterConfig::default(),
            sigma: 4.0,
            tau: 0.07,
            map_size: None,
            patch_source: PatchSource::Local,
            plain_cosine_maps: false,
            sample_points: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.prompt.validate()?;
        if !(self.sigma >= 0.0) {
            return Err(Error::InvalidConfig(format!("sigma must be non-negative, got {}", self.sigma)));
        }
        if let Some([h, w]) = self.map_size {
            if h == 0 || w == 0 {
                return Err(Error::InvalidConfig("map size must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Frozen-encoder outputs for one image.
pub type ImageFeatures = PatchFeaturePyramid;

/// Inference result for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Final anomaly map `M` in `[0, 1]`.
    pub map: Mat,
    /// Aggregated normal map.
    pub normal: Mat,
    /// Aggregated abnormal map.
    pub abnormal: Mat,
    pub score: ScoreRecord,
}

/// Tape handles of one image's forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub normal: Var,
    pub abnormal: Var,
    pub abnormal_prob: Var,
    pub map_max: Var,
}

pub struct Model {
    pub config: ModelConfig,
    pub vision: VisionEncoder,
    pub text: TinyTextEncoder,
    pub fusion: Fusion,
    /// Learnable parameters (`prompt.*`, `fusion.*`, `adapter.*`).
    pub params: ParamStore,
}

impl Model {
    /// Loads the frozen encoders and draws fresh learnable parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (vision, text) = config.backbone.load()?;
        let fusion = Fusion::new(Self::fusion_config(&config, &vision, &text))?;
        let mut params = ParamStore::new();
        LearnablePromptBank::new(config.prompt.clone(), text.token_dim(), seed)?.write_params(&mut params);
        params.extend(fusion.init_params(seed.wrapping_add(1)));
        let d = text.dim();
        if vision.config.output_dim != d {
            return Err(Error::InvalidConfig(format!(
                "visual output width {} differs from text width {d}",
                vision.config.output_dim
            )));
        }
        AdapterParams::random(d, config.adapter.bottleneck_for(d), seed.wrapping_add(2))?.write_params(&mut params);
        Ok(Self { config, vision, text, fusion, params })
    }

    /// Rebuilds a model around saved learnable parameters.
    pub fn with_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        for (name, value) in model.params.iter() {
            let saved =
                params.get(name).ok_or_else(|| Error::WeightLoadFailure(format!("missing parameter `{name}`")))?;
            if saved.shape() != value.shape() {
                return Err(Error::WeightLoadFailure(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    saved.shape(),
                    value.shape()
                )));
            }
        }
        if params.len() != model.params.len() {
            return Err(Error::WeightLoadFailure("checkpoint has unexpected parameters".into()));
        }
        model.params = params;
        Ok(model)
    }

    fn fusion_config(config: &ModelConfig, vision: &VisionEncoder, text: &TinyTextEncoder) -> FusionConfig {
        let mut fc = FusionConfig::new(vision.config.width, text.dim());
        fc.tau = config.tau;
        if let Some(p) = config.sample_points {
            fc.sample_points = p;
        }
        if config.plain_cosine_maps {
            fc.mode = crate::fusion::FusionMode::PlainCosine;
        }
        fc
    }

    pub fn map_size(&self) -> (usize, usize) {
        match self.config.map_size {
            Some([h, w]) => (h, w),
            None => (self.vision.config.image_side, self.vision.config.image_side),
        }
    }

    pub fn load_image(&self, path: &Path) -> Result<PixelImage> {
        let c = &self.vision.config;
        load_preprocessed(path, c.image_side, c.mean, c.std)
    }

    pub fn extract(&self, image: &PixelImage) -> Result<ImageFeatures> {
        let feats = self.vision.encode_image_from(image, self.config.patch_source)?;
        if feats.stages.len() != STAGE_COUNT {
            return Err(Error::MissingStage { expected: STAGE_COUNT, got: feats.stages.len() });
        }
        Ok(feats)
    }

    pub fn text_vars(&self, g: &mut Graph, binder: &mut Binder<'_>, class: &str) -> Result<TextFeatureVars> {
        encode_prompts_var(g, binder, &self.config.prompt, class, &self.text)
    }

    /// Encoded prompt features for `class`.
    pub fn text_features(&self, class: &str) -> Result<TextFeatures> {
        let mut g = Graph::new();
        let mut binder = Binder::new(&self.params, TrainableSet::NONE);
        let vars = self.text_vars(&mut g, &mut binder, class)?;
        TextFeatures::from_means(
            g.value(vars.normal_mean).as_slice().to_vec(),
            g.value(vars.abnormal_mean).as_slice().to_vec(),
        )
    }

    pub fn forward_var(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        features: &ImageFeatures,
        text: Var,
    ) -> ForwardVars {
        let mut per_stage = Vec::with_capacity(STAGE_COUNT);
        for (i, stage) in features.stages.iter().enumerate() {
            let f = g.constant(stage.features.clone());
            per_stage.push(self.fusion.stage_var(g, binder, i, f, stage.height, stage.width, text));
        }
        let (h, w) = self.map_size();
        let (normal, abnormal) = aggregate_var(g, &per_stage, h, w);
        let map = final_map_var(g, normal, abnormal, self.config.sigma);
        let global = g.constant(Mat::row_vector(&features.global));
        let adapted = adapt_var(g, binder, global, &self.config.adapter);
        let (abnormal_prob, map_max) = score_var(g, adapted, text, map);
        ForwardVars { normal, abnormal, abnormal_prob, map_max }
    }

    /// Maps and score from cached features and the class's text features.
    pub fn predict_features(&self, features: &ImageFeatures, text: &TextFeatures) -> Result<Prediction> {
        let c = self.text.dim();
        if features.global.len() != c {
            return Err(Error::ShapeMismatch(format!("global feature width {} vs {c}", features.global.len())));
        }
        let mut g = Graph::new();
        let mut binder = Binder::new(&self.params, TrainableSet::NONE);
        let t = g.constant(text.text_matrix());
        let vars = self.forward_var(&mut g, &mut binder, features, t);
        let normal = g.value(vars.normal).clone();
        let abnormal = g.value(vars.abnormal).clone();
        let map = crate::fusion::final_map(&normal, &abnormal, self.config.sigma)?;
        let score = ScoreRecord::new(g.scalar(vars.abnormal_prob), map.max());
        if !score.s_global.is_finite() || !map.is_finite() {
            return Err(Error::EncoderFailure("non-finite prediction".into()));
        }
        Ok(Prediction { map, normal, abnormal, score })
    }

    pub fn predict(&self, image: &PixelImage, class: &str) -> Result<Prediction> {
        let text = self.text_features(class)?;
        self.predict_features(&self.extract(image)?, &text)
    }

    /// Anomaly map and score for an image file.
    pub fn infer(&self, path: &Path, class: &str) -> Result<(Mat, ScoreRecord)> {
        let p = self.predict(&self.load_image(path)?, class)?;
        Ok((p.map, p.score))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        Model::new(ModelConfig::tiny(1), 2).unwrap()
    }

    fn image(seed: u64) -> PixelImage {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        PixelImage::from_chw(32, 32, (0..3 * 32 * 32).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn prediction_contracts() {
        let m = model();
        let p = m.predict(&image(3), "tile").unwrap();
        assert_eq!(p.map.shape(), (32, 32));
        assert!(p.map.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!((p.score.s_global - p.score.abnormal_prob - p.score.map_max).abs() < 1e-15);
        assert!((0.0..=2.0).contains(&p.score.s_global));
        let again = m.predict(&image(3), "tile").unwrap();
        assert_eq!(p, again);
    }

    #[test]
    fn parameter_groups() {
        let m = model();
        let names: Vec<&String> = m.params.names().collect();
        assert!(names
            .iter()
            .all(|n| n.starts_with("prompt.") || n.starts_with("fusion.") || n.starts_with("adapter.")));
        assert!(names.iter().any(|n| n.starts_with("fusion.3.")));
    }

    #[test]
    fn with_params_rejects_wrong_shapes() {
        let m = model();
        let mut params = m.params.clone();
        params.insert("adapter.w_up", Mat::zeros(1, 1));
        assert!(matches!(Model::with_params(m.config.clone(), params), Err(Error::WeightLoadFailure(_))));
        assert!(Model::with_params(m.config.clone(), m.params.clone()).is_ok());
    }

    #[test]
    fn empty_class_rejected() {
        assert!(matches!(model().predict(&image(1), " "), Err(Error::EmptyClassName)));
    }
}
