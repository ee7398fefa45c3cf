//! Sources of anomaly descriptions: canned fixtures and (behind the `live`
//! feature) an OpenAI-compatible chat endpoint.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientMode {
    Live,
    Fixture,
}

/// An image passed to a visual question.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRef {
    /// Stable identifier, usually the dataset-relative path.
    pub id: String,
    pub path: PathBuf,
}

impl ImageRef {
    pub fn new(id: impl Into<String>, path: impl Into<PathBuf>) -> Self {
        Self { id: id.into(), path: path.into() }
    }
}

pub trait DescriptionClient: Send + Sync {
    fn mode(&self) -> ClientMode;
    /// Responses to `prompt`, optionally about `image`.
    fn query(&self, prompt: &str, image: Option<&ImageRef>) -> Result<Vec<String>>;
}

/// Deterministic client over a prompt → responses map. Image questions first
/// look up `"<image id>\n<prompt>"`, then the bare prompt. Unknown prompts
/// yield no responses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FixtureClient {
    pub responses: BTreeMap<String, Vec<String>>,
}

impl FixtureClient {
    pub fn new(responses: BTreeMap<String, Vec<String>>) -> Self {
        Self { responses }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let responses = serde_json::from_str(&text)
            .map_err(|e| Error::SchemaMismatch(format!("fixture {}: {e}", path.display())))?;
        Ok(Self { responses })
    }

    pub fn image_key(image_id: &str, prompt: &str) -> String {
        format!("{image_id}\n{prompt}")
    }
}

impl DescriptionClient for FixtureClient {
    fn mode(&self) -> ClientMode {
        ClientMode::Fixture
    }

    fn query(&self, prompt: &str, image: Option<&ImageRef>) -> Result<Vec<String>> {
        let specific = image.and_then(|img| self.responses.get(&Self::image_key(&img.id, prompt)));
        Ok(specific.or_else(|| self.responses.get(prompt)).cloned().unwrap_or_default())
    }
}

#[cfg(feature = "live")]
pub use live::LiveClient;

#[cfg(feature = "live")]
mod live {
    use base64::Engine;
    use serde_json::{json, Value};

    use super::*;

    /// Chat-completions client. Multi-line answers are split into one
    /// description per non-empty line.
    #[derive(Clone, Debug)]
    pub struct LiveClient {
        pub endpoint: String,
        pub model: String,
        pub api_key: Option<String>,
    }

    impl LiveClient {
        pub fn new(endpoint: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
            Self { endpoint: endpoint.into(), model: model.into(), api_key }
        }
    }

    fn failure(e: impl std::fmt::Display) -> Error {
        Error::ClientFailure(e.to_string())
    }

    impl DescriptionClient for LiveClient {
        fn mode(&self) -> ClientMode {
            ClientMode::Live
        }

        fn query(&self, prompt: &str, image: Option<&ImageRef>) -> Result<Vec<String>> {
            let content = match image {
                None => json!(prompt),
                Some(img) => {
                    let bytes = std::fs::read(&img.path)
                        .map_err(|e| Error::UnreadableImage { path: img.path.clone(), reason: e.to_string() })?;
                    let encoded = base64::engine::general_purpose::STANDARD.encode(bytes);
                    json!([
                        {"type": "text", "text": prompt},
                        {"type": "image_url", "image_url": {"url": format!("data:image/png;base64,{encoded}")}}
                    ])
                }
            };
            let body = json!({"model": self.model, "messages": [{"role": "user", "content": content}]});
            let mut request = ureq::post(&self.endpoint);
            if let Some(key) = &self.api_key {
                request = request.header("Authorization", &format!("Bearer {key}"));
            }
            let mut response = request.send_json(&body).map_err(failure)?;
            let reply: Value = response.body_mut().read_json().map_err(failure)?;
            let text = reply["choices"][0]["message"]["content"]
                .as_str()
                .ok_or_else(|| failure("response has no message content"))?;
            Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
        }
    }
}
