//! Knowledge base of class-level and image-level anomaly descriptions.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::client::{ClientMode, DescriptionClient, ImageRef};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const CLASS_SLOT: &str = "{class}";

/// Which auxiliary images receive a visual question.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VqaSource {
    #[default]
    AnomalousOnly,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplateConfig {
    pub class_template: String,
    pub vqa_template: String,
    pub n_class_descriptions: usize,
    pub m_image_descriptions: usize,
    /// Extra attempts when a client returns too few responses.
    pub retry_budget: usize,
    pub vqa_source: VqaSource,
}

impl Default for PromptTemplateConfig {
    fn default() -> Self {
        Self {
            class_template: "Q: Describe what an abnormal image of {class} looks like?".into(),
            vqa_template: "<IMAGE> + Q: Identify anomalies in the input image of the specified {class}. \
                           Describe each anomaly's location, color, shape, size, and other characteristics."
                .into(),
            n_class_descriptions: 5,
            m_image_descriptions: 1,
            retry_budget: 2,
            vqa_source: VqaSource::AnomalousOnly,
        }
    }
}

impl PromptTemplateConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("class_template", &self.class_template), ("vqa_template", &self.vqa_template)] {
            if t.matches(CLASS_SLOT).count() != 1 {
                return Err(Error::InvalidConfig(format!("{name} must contain exactly one {CLASS_SLOT} slot")));
            }
        }
        if self.n_class_descriptions == 0 {
            return Err(Error::InvalidConfig("n_class_descriptions must be at least 1".into()));
        }
        Ok(())
    }

    pub fn render_class_prompt(&self, class: &str) -> Result<String> {
        render(&self.class_template, class)
    }

    pub fn render_vqa_prompt(&self, class: &str) -> Result<String> {
        render(&self.vqa_template, class)
    }
}

fn render(template: &str, class: &str) -> Result<String> {
    if class.trim().is_empty() {
        return Err(Error::EmptyClassName);
    }
    Ok(template.replacen(CLASS_SLOT, class, 1))
}

pub fn render_class_prompt(class: &str) -> Result<String> {
    PromptTemplateConfig::default().render_class_prompt(class)
}

pub fn render_vqa_prompt(class: &str) -> Result<String> {
    PromptTemplateConfig::default().render_vqa_prompt(class)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Llm,
    Vqa,
    Fixture,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Description {
    pub text: String,
    pub source: Source,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDescription {
    pub image_id: String,
    pub text: String,
    pub source: Source,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassKnowledge {
    pub llm: Vec<Description>,
    pub vqa: Vec<ImageDescription>,
}

impl ClassKnowledge {
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.llm.iter().map(|d| d.text.as_str()).chain(self.vqa.iter().map(|d| d.text.as_str()))
    }

    pub fn len(&self) -> usize {
        self.llm.len() + self.vqa.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    pub classes: BTreeMap<String, ClassKnowledge>,
}

#[derive(Serialize, Deserialize)]
struct KbFile {
    schema_version: u32,
    classes: BTreeMap<String, ClassKnowledge>,
}

fn take_exact(
    client: &dyn DescriptionClient,
    prompt: &str,
    image: Option<&ImageRef>,
    class: &str,
    wanted: usize,
    retry_budget: usize,
) -> Result<Vec<String>> {
    let mut got = 0;
    for _ in 0..=retry_budget {
        let responses: Vec<String> =
            client.query(prompt, image)?.into_iter().filter(|r| !r.trim().is_empty()).collect();
        if responses.len() >= wanted {
            return Ok(responses.into_iter().take(wanted).collect());
        }
        got = got.max(responses.len());
    }
    Err(Error::InsufficientDescriptions { class: class.to_string(), wanted, got, attempts: retry_budget + 1 })
}

/// Exactly `n` non-empty class-level descriptions.
pub fn collect_class_descriptions(
    client: &dyn DescriptionClient,
    config: &PromptTemplateConfig,
    class: &str,
    n: usize,
) -> Result<Vec<String>> {
    let prompt = config.render_class_prompt(class)?;
    if n == 0 {
        return Err(Error::InvalidConfig("n must be at least 1".into()));
    }
    take_exact(client, &prompt, None, class, n, config.retry_budget)
}

/// Exactly `m` descriptions of one image; `m = 0` skips the client.
pub fn collect_image_descriptions(
    client: &dyn DescriptionClient,
    config: &PromptTemplateConfig,
    image: &ImageRef,
    class: &str,
    m: usize,
) -> Result<Vec<String>> {
    let prompt = config.render_vqa_prompt(class)?;
    if m == 0 {
        return Ok(Vec::new());
    }
    image::image_dimensions(&image.path)
        .map_err(|e| Error::UnreadableImage { path: image.path.clone(), reason: e.to_string() })?;
    take_exact(client, &prompt, Some(image), class, m, config.retry_budget)
}

/// Queries the client for every class (and each listed image) and assembles
/// the knowledge base in class-name order.
pub fn build_kb(
    client: &dyn DescriptionClient,
    config: &PromptTemplateConfig,
    requests: &BTreeMap<String, Vec<ImageRef>>,
) -> Result<KnowledgeBase> {
    config.validate()?;
    let (llm_source, vqa_source) = match client.mode() {
        ClientMode::Fixture => (Source::Fixture, Source::Fixture),
        ClientMode::Live => (Source::Llm, Source::Vqa),
    };
    let mut kb = KnowledgeBase::default();
    for (class, images) in requests {
        let llm = collect_class_descriptions(client, config, class, config.n_class_descriptions)?
            .into_iter()
            .map(|text| Description { text, source: llm_source })
            .collect();
        let mut vqa = Vec::new();
        for image in images {
            for text in collect_image_descriptions(client, config, image, class, config.m_image_descriptions)? {
                vqa.push(ImageDescription { image_id: image.id.clone(), text, source: vqa_source });
            }
        }
        kb.classes.insert(class.clone(), ClassKnowledge { llm, vqa });
    }
    Ok(kb)
}

/// `(Σ encode(p_llm) + Σ encode(p_vqa)) / (N + M)`, unnormalized.
pub fn knowledge_mean(kb: &KnowledgeBase, class: &str, encode: &dyn Fn(&str) -> Result<Vec<f64>>) -> Result<Vec<f64>> {
    let entry = kb.classes.get(class).ok_or_else(|| Error::UnknownClass(class.to_string()))?;
    if entry.is_empty() {
        return Err(Error::EmptyKnowledge(class.to_string()));
    }
    let mut sum: Option<Vec<f64>> = None;
    for text in entry.texts() {
        let v = encode(text)?;
        match &mut sum {
            None => sum = Some(v),
            Some(s) => {
                if s.len() != v.len() {
                    return Err(Error::EncoderFailure("inconsistent embedding widths".into()));
                }
                s.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
            }
        }
    }
    let n = entry.len() as f64;
    Ok(sum.unwrap_or_default().into_iter().map(|x| x / n).collect())
}

pub fn kb_to_string(kb: &KnowledgeBase) -> String {
    let file = KbFile { schema_version: SCHEMA_VERSION, classes: kb.classes.clone() };
    let mut s = serde_json::to_string_pretty(&file).expect("knowledge base serializes");
    s.push('\n');
    s
}

pub fn kb_from_str(text: &str) -> Result<KnowledgeBase> {
    let raw: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::SchemaMismatch(format!("not a knowledge base: {e}")))?;
    match raw.get("schema_version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == SCHEMA_VERSION as u64 => {}
        other => return Err(Error::SchemaMismatch(format!("unsupported schema version {other:?}"))),
    }
    let file: KbFile = serde_json::from_value(raw).map_err(|e| Error::SchemaMismatch(e.to_string()))?;
    for (class, entry) in &file.classes {
        if entry.texts().any(|t| t.trim().is_empty()) {
            return Err(Error::SchemaMismatch(format!("class `{class}` has an empty description")));
        }
    }
    Ok(KnowledgeBase { classes: file.classes })
}

pub fn save_kb(kb: &KnowledgeBase, path: &Path) -> Result<()> {
    std::fs::write(path, kb_to_string(kb)).map_err(|e| Error::io(path, e))
}

pub fn load_kb(path: &Path) -> Result<KnowledgeBase> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    kb_from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::FixtureClient;

    fn fixture(class_responses: usize) -> FixtureClient {
        let mut map = BTreeMap::new();
        map.insert(
            render_class_prompt("fabric").unwrap(),
            (0..class_responses).map(|i| format!("fabric defect {i}")).collect(),
        );
        map.insert(render_vqa_prompt("fabric").unwrap(), vec!["a dark stain near the centre".into()]);
        FixtureClient::new(map)
    }

    #[test]
    fn templates_render_exactly() {
        assert_eq!(render_class_prompt("fabric").unwrap(), "Q: Describe what an abnormal image of fabric looks like?");
        assert_eq!(
            render_class_prompt("metal nut").unwrap(),
            "Q: Describe what an abnormal image of metal nut looks like?"
        );
        assert_eq!(
            render_vqa_prompt("fabric").unwrap(),
            "<IMAGE> + Q: Identify anomalies in the input image of the specified fabric. Describe each anomaly's \
             location, color, shape, size, and other characteristics."
        );
        assert!(matches!(render_class_prompt(""), Err(Error::EmptyClassName)));
        assert!(matches!(render_vqa_prompt("  "), Err(Error::EmptyClassName)));
    }

    #[test]
    fn template_slot_count_checked() {
        let cfg = PromptTemplateConfig { class_template: "{class} and {class}".into(), ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        assert!(PromptTemplateConfig::default().validate().is_ok());
    }

    #[test]
    fn class_descriptions_pass_through_in_order() {
        let cfg = PromptTemplateConfig::default();
        let got = collect_class_descriptions(&fixture(5), &cfg, "fabric", 5).unwrap();
        assert_eq!(got, (0..5).map(|i| format!("fabric defect {i}")).collect::<Vec<_>>());
    }

    #[test]
    fn too_few_descriptions_fail() {
        let cfg = PromptTemplateConfig { retry_budget: 0, ..Default::default() };
        let err = collect_class_descriptions(&fixture(3), &cfg, "fabric", 5).unwrap_err();
        assert!(matches!(err, Error::InsufficientDescriptions { wanted: 5, got: 3, attempts: 1, .. }));
    }

    #[test]
    fn zero_image_descriptions_skip_client() {
        struct Panics;
        impl DescriptionClient for Panics {
            fn mode(&self) -> ClientMode {
                ClientMode::Fixture
            }
            fn query(&self, _: &str, _: Option<&ImageRef>) -> Result<Vec<String>> {
                panic!("client contacted")
            }
        }
        let img = ImageRef::new("x", "/nonexistent.png");
        let got = collect_image_descriptions(&Panics, &PromptTemplateConfig::default(), &img, "fabric", 0).unwrap();
        assert!(got.is_empty());
    }

    #[test]
    fn unreadable_image() {
        let img = ImageRef::new("x", "/nonexistent.png");
        let err = collect_image_descriptions(&fixture(5), &PromptTemplateConfig::default(), &img, "fabric", 1);
        assert!(matches!(err, Err(Error::UnreadableImage { .. })));
    }

    #[test]
    fn knowledge_mean_values() {
        let mut kb = KnowledgeBase::default();
        let d = |t: &str| Description { text: t.into(), source: Source::Fixture };
        kb.classes.insert(
            "c".into(),
            ClassKnowledge {
                llm: vec![d("a"), d("b")],
                vqa: vec![ImageDescription { image_id: "i".into(), text: "ab".into(), source: Source::Fixture }],
            },
        );
        let encode =
            |t: &str| -> Result<Vec<f64>> { Ok(vec![t.contains('a') as u8 as f64, t.contains('b') as u8 as f64]) };
        let mean = knowledge_mean(&kb, "c", &encode).unwrap();
        assert!((mean[0] - 2.0 / 3.0).abs() < 1e-12 && (mean[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!(matches!(knowledge_mean(&kb, "zz", &encode), Err(Error::UnknownClass(_))));
        kb.classes.insert("e".into(), ClassKnowledge::default());
        assert!(matches!(knowledge_mean(&kb, "e", &encode), Err(Error::EmptyKnowledge(_))));
    }

    #[test]
    fn save_load_round_trip_and_schema() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.json");
        let kb = build_kb(&fixture(5), &PromptTemplateConfig::default(), &BTreeMap::from([("fabric".into(), vec![])]))
            .unwrap();
        save_kb(&kb, &path).unwrap();
        assert_eq!(load_kb(&path).unwrap(), kb);
        save_kb(&KnowledgeBase::default(), &path).unwrap();
        assert!(load_kb(&path).unwrap().classes.is_empty());
        std::fs::write(&path, r#"{"schema_version": 9, "classes": {}}"#).unwrap();
        assert!(matches!(load_kb(&path), Err(Error::SchemaMismatch(_))));
    }
}
