//! Running the model under evaluation over a manifest.

use serde::{Deserialize, Serialize};

use crate::backends::{BackendRequest, BackendRole, Backends, ImageInput};
use crate::exec::{self, Parallelism};
use crate::model::{content_hash, ModelResponse, ResponseEntry, ResponseError, Sample};
use crate::store::ImageStore;

pub const DEFAULT_SYSTEM: &str = "Answer the question based only on the provided images.";
pub const DEFAULT_USER: &str = "{images}Answer the question based only on the provided images.\nQuestion: {question}";

/// Prompt for the subject model. `{question}` and `{images}` are substituted;
/// `{images}` becomes one `Image k: <image>` line per attached image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    #[serde(default)]
    pub system: Option<String>,
    pub user: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            system: Some(DEFAULT_SYSTEM.to_string()),
            user: DEFAULT_USER.to_string(),
        }
    }
}

impl PromptTemplate {
    /// Short hash of the template text, recorded in reports.
    pub fn version(&self) -> String {
        let text = format!("{}\u{0}{}", self.system.as_deref().unwrap_or(""), self.user);
        content_hash(text.as_bytes())[..12].to_string()
    }

    pub fn render(&self, question: &str, n_images: usize) -> String {
        let images: String = (1..=n_images).map(|k| format!("Image {k}: <image>\n")).collect();
        self.user
            .replace("{images}", &images)
            .replace("{question}", question)
    }
}

fn ask(
    backends: &Backends,
    store: &ImageStore,
    template: &PromptTemplate,
    sample: &Sample,
) -> Result<String, String> {
    let mut req = BackendRequest::new(BackendRole::Subject, template.render(&sample.question, sample.images.len()))
        .key(sample.id.clone());
    if let Some(system) = &template.system {
        req = req.system(system.clone());
    }
    for id in &sample.images {
        let asset = store.image(id).map_err(|e| e.to_string())?;
        let bytes = store.image_bytes(&asset).map_err(|e| e.to_string())?;
        req = req.image(ImageInput {
            bytes,
            media: asset.media,
            store_id: Some(asset.id),
        });
    }
    let reply = backends
        .call(BackendRole::Subject, req)
        .map_err(|e| e.to_string())?;
    Ok(reply.text.unwrap_or_default())
}

/// One entry per sample, in sample-id order. Failures become error entries.
pub fn run_subject(
    backends: &Backends,
    store: &ImageStore,
    samples: &[Sample],
    template: &PromptTemplate,
    model_id: &str,
    mode: Parallelism,
) -> Vec<ResponseEntry> {
    let mut ordered: Vec<&Sample> = samples.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));
    exec::map(mode, &ordered, |s| match ask(backends, store, template, s) {
        Ok(raw_text) => ResponseEntry::Response(ModelResponse {
            sample_id: s.id.clone(),
            model_id: model_id.to_string(),
            raw_text,
        }),
        Err(error) => {
            log::warn!("subject failed on {}: {error}", s.id);
            ResponseEntry::Error(ResponseError {
                sample_id: s.id.clone(),
                model_id: model_id.to_string(),
                error,
            })
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_fills_placeholders() {
        let t = PromptTemplate::default();
        let p = t.render("What color is the car?", 2);
        assert!(p.starts_with("Image 1: <image>\nImage 2: <image>\n"));
        assert!(p.ends_with("Question: What color is the car?"));
        assert_eq!(t.version().len(), 12);
        let other = PromptTemplate {
            system: None,
            user: "{question}".into(),
        };
        assert_ne!(t.version(), other.version());
    }
}
