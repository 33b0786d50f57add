//! Domain types shared by every pipeline stage.
//!
//! Everything here is a plain immutable value that serializes to one JSONL
//! manifest line. Lineage (which image was derived from which) lives in the
//! [`ImageAsset::origin`] field and in [`Provenance`] on derived samples.

use std::collections::BTreeMap;
use std::fmt;

use serde::de::{self, Deserializer, MapAccess, Visitor};
use serde::ser::{SerializeMap, Serializer};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Wire form of the retrieval label.
pub const RET_TOKEN: &str = "<RET>";

/// Hex SHA-256 digest of `bytes`. Used as the id of every stored artifact.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    Webqa,
    Vqav2,
    Okvqa,
    Custom,
}

impl Dataset {
    pub fn as_str(self) -> &'static str {
        match self {
            Dataset::Webqa => "webqa",
            Dataset::Vqav2 => "vqav2",
            Dataset::Okvqa => "okvqa",
            Dataset::Custom => "custom",
        }
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Dataset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "webqa" => Ok(Dataset::Webqa),
            "vqav2" | "vqa" => Ok(Dataset::Vqav2),
            "okvqa" => Ok(Dataset::Okvqa),
            "custom" => Ok(Dataset::Custom),
            other => Err(format!("unknown dataset tag {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionCategory {
    YesNo,
    Color,
    Shape,
    Number,
    Open,
}

impl QuestionCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            QuestionCategory::YesNo => "yes_no",
            QuestionCategory::Color => "color",
            QuestionCategory::Shape => "shape",
            QuestionCategory::Number => "number",
            QuestionCategory::Open => "open",
        }
    }
}

/// The attribute an infill perturbation changes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Color,
    Shape,
}

impl Attribute {
    pub fn category(self) -> QuestionCategory {
        match self {
            Attribute::Color => QuestionCategory::Color,
            Attribute::Shape => QuestionCategory::Shape,
        }
    }

    pub fn from_category(category: QuestionCategory) -> Option<Self> {
        match category {
            QuestionCategory::Color => Some(Attribute::Color),
            QuestionCategory::Shape => Some(Attribute::Shape),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Attribute::Color => "color",
            Attribute::Shape => "shape",
        }
    }
}

/// Expected answer of a sample: a free-text label or the retrieval token.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Answer {
    Text(String),
    Ret,
}

impl Answer {
    pub fn text(label: impl Into<String>) -> Self {
        Answer::Text(label.into())
    }

    pub fn is_ret(&self) -> bool {
        matches!(self, Answer::Ret)
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Answer::Text(t) => Some(t),
            Answer::Ret => None,
        }
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Answer::Text(t) => f.write_str(t),
            Answer::Ret => f.write_str(RET_TOKEN),
        }
    }
}

// Manifest form: {"ret":true} or {"text":"..."}
impl Serialize for Answer {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(1))?;
        match self {
            Answer::Text(t) => map.serialize_entry("text", t)?,
            Answer::Ret => map.serialize_entry("ret", &true)?,
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for Answer {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct AnswerVisitor;

        impl<'de> Visitor<'de> for AnswerVisitor {
            type Value = Answer;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(r#"{"ret":true} or {"text":"..."}"#)
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Answer, A::Error> {
                let mut out = None;
                while let Some(key) = map.next_key::<String>()? {
                    if out.is_some() {
                        return Err(de::Error::custom("answer must have exactly one key"));
                    }
                    out = Some(match key.as_str() {
                        "ret" => {
                            if !map.next_value::<bool>()? {
                                return Err(de::Error::custom("\"ret\" must be true"));
                            }
                            Answer::Ret
                        }
                        "text" => Answer::Text(map.next_value()?),
                        other => return Err(de::Error::unknown_field(other, &["ret", "text"])),
                    });
                }
                out.ok_or_else(|| de::Error::custom("empty answer object"))
            }
        }

        deserializer.deserialize_map(AnswerVisitor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictType {
    Original,
    Counterfactual,
    Parametric,
    SourceConflict,
}

impl ConflictType {
    /// Short form used inside sample ids.
    pub fn id_tag(self) -> &'static str {
        match self {
            ConflictType::Original => "original",
            ConflictType::Counterfactual => "counterfactual",
            ConflictType::Parametric => "parametric",
            ConflictType::SourceConflict => "source",
        }
    }
}

impl fmt::Display for ConflictType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id_tag())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PerturbationMethod {
    ObjectRemoval,
    AttributeInfill {
        attribute: Attribute,
        original_value: String,
        new_value: String,
    },
}

impl PerturbationMethod {
    pub fn label(&self) -> &'static str {
        match self {
            PerturbationMethod::ObjectRemoval => "object removal",
            PerturbationMethod::AttributeInfill { .. } => "object infill",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MediaType {
    Png,
    Jpeg,
}

impl MediaType {
    pub fn extension(self) -> &'static str {
        match self {
            MediaType::Png => "png",
            MediaType::Jpeg => "jpg",
        }
    }

    pub fn mime(self) -> &'static str {
        match self {
            MediaType::Png => "image/png",
            MediaType::Jpeg => "image/jpeg",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImageOrigin {
    Original {
        dataset: Dataset,
        source_id: String,
    },
    Perturbed {
        parent_image_id: String,
        method: PerturbationMethod,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageAsset {
    pub id: String,
    pub media: MediaType,
    pub width: u32,
    pub height: u32,
    pub origin: ImageOrigin,
}

impl ImageAsset {
    pub fn is_perturbed(&self) -> bool {
        matches!(self.origin, ImageOrigin::Perturbed { .. })
    }

    pub fn parent_id(&self) -> Option<&str> {
        match &self.origin {
            ImageOrigin::Perturbed {
                parent_image_id, ..
            } => Some(parent_image_id),
            ImageOrigin::Original { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskAsset {
    pub id: String,
    pub parent_image_id: String,
    pub width: u32,
    pub height: u32,
    pub nonzero_pixel_count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub parent_sample_id: String,
    #[serde(default)]
    pub perturbation_record_ids: Vec<String>,
    /// Set on randomized negative counterfactuals.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub negative: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub dataset: Dataset,
    pub split: Split,
    pub question: String,
    pub category: QuestionCategory,
    pub images: Vec<String>,
    pub expected: Answer,
    pub conflict: ConflictType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl Sample {
    /// `{dataset}:{source-id}:{conflict}:{ordinal}`
    pub fn make_id(
        dataset: Dataset,
        source_id: &str,
        conflict: ConflictType,
        ordinal: impl fmt::Display,
    ) -> String {
        format!("{dataset}:{source_id}:{}:{ordinal}", conflict.id_tag())
    }

    /// Source id component of a sample id built by [`Sample::make_id`].
    pub fn source_id(&self) -> &str {
        let rest = self
            .id
            .strip_prefix(self.dataset.as_str())
            .and_then(|r| r.strip_prefix(':'))
            .unwrap_or(&self.id);
        // source ids may themselves contain ':'; the last two fields are fixed
        let mut cut = rest.len();
        for _ in 0..2 {
            match rest[..cut].rfind(':') {
                Some(i) => cut = i,
                None => return rest,
            }
        }
        &rest[..cut]
    }

    pub fn is_negative(&self) -> bool {
        self.provenance.as_ref().is_some_and(|p| p.negative)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Quality {
    Pending,
    Pass,
    Fail { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("quality of record {record} is already {current:?}")]
pub struct QualityTransitionError {
    pub record: String,
    pub current: Quality,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PerturbationRecord {
    pub id: String,
    pub sample_id: String,
    /// Position of the perturbed image within the parent sample's image list.
    pub image_index: usize,
    pub source_image_id: String,
    pub perturbed_image_id: String,
    pub object_noun: String,
    pub mask_id: String,
    pub method: PerturbationMethod,
    pub backend_attribution: BTreeMap<String, String>,
    pub quality: Quality,
}

impl PerturbationRecord {
    pub fn make_id(sample_id: &str, image_index: usize) -> String {
        format!("{sample_id}#{image_index}")
    }

    pub fn set_quality(&mut self, verdict: Quality) -> Result<(), QualityTransitionError> {
        if self.quality != Quality::Pending || verdict == Quality::Pending {
            return Err(QualityTransitionError {
                record: self.id.clone(),
                current: self.quality.clone(),
            });
        }
        self.quality = verdict;
        Ok(())
    }

    pub fn is_pass(&self) -> bool {
        self.quality == Quality::Pass
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelResponse {
    pub sample_id: String,
    pub model_id: String,
    pub raw_text: String,
}

/// A subject call that failed; kept in the response file so it can be counted.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResponseError {
    pub sample_id: String,
    pub model_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ResponseEntry {
    Response(ModelResponse),
    Error(ResponseError),
}

impl ResponseEntry {
    pub fn sample_id(&self) -> &str {
        match self {
            ResponseEntry::Response(r) => &r.sample_id,
            ResponseEntry::Error(e) => &e.sample_id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Good,
    Bad,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReviewRating {
    pub sample_id: String,
    pub annotator: String,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub timestamp: chrono::DateTime<chrono::Utc>,
}
