//! Object extraction, segmentation and image perturbation.
//!
//! A [`PerturbPlan`] covers one image of one original sample. Running a plan
//! extracts the question's object, segments it, and either removes it or
//! repaints it with a new color or shape. Every plan ends as exactly one
//! Pending [`PerturbationRecord`] or one [`PipelineSkip`].

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::{BackendError, BackendRequest, BackendRole, Backends, ImageInput};
use crate::exec::{self, Parallelism};
use crate::metrics::vocab::{tokenize, CategoryVocabulary};
use crate::model::{
    Attribute, ConflictType, Dataset, ImageAsset, ImageOrigin, MaskAsset, PerturbationMethod,
    PerturbationRecord, Quality, QuestionCategory, Sample,
};
use crate::store::{encode_mask, probe, ImageStore};

pub const EXTRACTOR_TEMPLATE: &str = "Extract the noun that functions as the object of the following question. Reply with the noun only.\nQuestion: {question}";
pub const INFILL_TEMPLATE: &str = "a {new_value} {noun}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetFamily {
    Counterfactual,
    Parametric,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbPlan {
    pub sample_id: String,
    pub image_index: usize,
    pub family: TargetFamily,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute: Option<Attribute>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_value: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_value: Option<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StageError {
    #[error("object extraction failed: {0}")]
    ExtractionFailed(String),
    #[error("segmentation returned an empty mask")]
    SegmentationEmpty,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("store error: {0}")]
    Store(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("no alternative value for {0}")]
    NoAlternativeValue(String),
}

impl From<crate::store::StoreError> for StageError {
    fn from(e: crate::store::StoreError) -> Self {
        StageError::Store(e.to_string())
    }
}

/// Per-plan seed: first 8 bytes of sha256(run seed, sample id, image index).
pub fn plan_seed(run_seed: u64, sample_id: &str, image_index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(run_seed.to_le_bytes());
    h.update(sample_id.as_bytes());
    h.update((image_index as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// First token of `label` in the attribute vocabulary.
pub fn attribute_value(label: &str, attribute: Attribute, vocab: &CategoryVocabulary) -> Option<String> {
    tokenize(label).find(|t| vocab.contains(attribute.category(), t))
}

/// Uniform seeded draw from the attribute vocabulary minus `original`.
pub fn draw_new_value(
    attribute: Attribute,
    original: &str,
    seed: u64,
    vocab: &CategoryVocabulary,
) -> Result<String, StageError> {
    let choices: Vec<String> = vocab
        .tokens(attribute.category())
        .into_iter()
        .filter(|t| t != original)
        .collect();
    if choices.is_empty() {
        return Err(StageError::NoAlternativeValue(original.to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(choices[rng.random_range(0..choices.len())].clone())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Unplanned {
    pub sample_id: String,
    pub reason: String,
}

/// Plans for every original sample that can be perturbed.
///
/// WebQA yes/no questions get object removal, color and shape questions get
/// attribute infill, other WebQA categories get nothing. Every image of every
/// other dataset gets object removal.
pub fn plan_perturbations(
    samples: &[Sample],
    run_seed: u64,
    vocab: &CategoryVocabulary,
) -> (Vec<PerturbPlan>, Vec<Unplanned>) {
    let mut plans = Vec::new();
    let mut unplanned = Vec::new();
    let mut ordered: Vec<&Sample> = samples.iter().filter(|s| s.conflict == ConflictType::Original).collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));
    for s in ordered {
        let infill = match (s.dataset, s.category) {
            (Dataset::Webqa, QuestionCategory::YesNo) => None,
            (Dataset::Webqa, QuestionCategory::Color | QuestionCategory::Shape) => {
                Attribute::from_category(s.category)
            }
            (Dataset::Webqa, c) => {
                unplanned.push(Unplanned {
                    sample_id: s.id.clone(),
                    reason: format!("no perturbation for webqa {} questions", c.as_str()),
                });
                continue;
            }
            _ => None,
        };
        let original_value = match infill {
            Some(a) => match s.expected.as_text().and_then(|l| attribute_value(l, a, vocab)) {
                Some(v) => Some(v),
                None => {
                    unplanned.push(Unplanned {
                        sample_id: s.id.clone(),
                        reason: format!("label has no {} token", a.as_str()),
                    });
                    continue;
                }
            },
            None => None,
        };
        for idx in 0..s.images.len() {
            let seed = plan_seed(run_seed, &s.id, idx);
            let new_value = match (infill, &original_value) {
                (Some(a), Some(o)) => draw_new_value(a, o, seed, vocab).ok(),
                _ => None,
            };
            plans.push(PerturbPlan {
                sample_id: s.id.clone(),
                image_index: idx,
                family: if infill.is_some() {
                    TargetFamily::Parametric
                } else {
                    TargetFamily::Counterfactual
                },
                attribute: infill,
                original_value: original_value.clone(),
                new_value,
                seed,
            });
        }
    }
    (plans, unplanned)
}

/// Lowercase, strip punctuation and leading articles.
pub fn normalize_noun(reply: &str) -> Option<String> {
    let line = reply.lines().find(|l| !l.trim().is_empty())?;
    let mut words: Vec<String> = line
        .split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect();
    while words.first().is_some_and(|w| matches!(w.as_str(), "the" | "a" | "an")) {
        words.remove(0);
    }
    let ok = !words.is_empty()
        && words.len() <= 4
        && words
            .iter()
            .all(|w| w.chars().all(|c| c.is_alphabetic() || c == '-'));
    ok.then(|| words.join(" "))
}

pub fn extract_object(
    backends: &Backends,
    question: &str,
    template: &str,
    key: &str,
) -> Result<(String, String), StageError> {
    if question.trim().is_empty() {
        return Err(StageError::ExtractionFailed("empty question".into()));
    }
    let req = BackendRequest::new(BackendRole::ObjectExtractor, template.replace("{question}", question))
        .key(key.to_string());
    let reply = backends.call(BackendRole::ObjectExtractor, req)?;
    let text = reply.text.unwrap_or_default();
    let noun = normalize_noun(&text)
        .ok_or_else(|| StageError::ExtractionFailed(format!("unusable reply {text:?}")))?;
    Ok((noun, reply.backend))
}

fn image_input(store: &ImageStore, asset: &ImageAsset) -> Result<ImageInput, StageError> {
    Ok(ImageInput {
        bytes: store.image_bytes(asset)?,
        media: asset.media,
        store_id: Some(asset.id.clone()),
    })
}

pub fn segment_object(
    backends: &Backends,
    store: &ImageStore,
    image: &ImageAsset,
    noun: &str,
) -> Result<(MaskAsset, String), StageError> {
    let req = BackendRequest::new(BackendRole::Segmenter, noun).image(image_input(store, image)?);
    let reply = backends.call(BackendRole::Segmenter, req)?;
    let bytes = reply.image.unwrap_or_default();
    let mask = image::load_from_memory(&bytes)
        .map_err(|e| StageError::Protocol(format!("undecodable mask: {e}")))?
        .to_luma8();
    if mask.dimensions() != (image.width, image.height) {
        return Err(StageError::Protocol(format!(
            "mask is {}x{}, image is {}x{}",
            mask.width(),
            mask.height(),
            image.width,
            image.height
        )));
    }
    if mask.pixels().all(|p| p.0[0] == 0) {
        return Err(StageError::SegmentationEmpty);
    }
    Ok((store.put_mask(&mask, &image.id)?, reply.backend))
}

fn perturb_with(
    backends: &Backends,
    store: &ImageStore,
    role: BackendRole,
    prompt: String,
    image: &ImageAsset,
    mask: &MaskAsset,
    method: PerturbationMethod,
) -> Result<(ImageAsset, String), StageError> {
    if mask.parent_image_id != image.id {
        return Err(StageError::Precondition(format!(
            "mask {} belongs to {}, not {}",
            mask.id, mask.parent_image_id, image.id
        )));
    }
    let req = BackendRequest::new(role, prompt)
        .image(image_input(store, image)?)
        .mask(encode_mask(&store.mask_image(mask)?));
    let reply = backends.call(role, req)?;
    let bytes = reply.image.unwrap_or_default();
    let (_, w, h) = probe(&bytes).map_err(|e| StageError::Protocol(e.to_string()))?;
    if (w, h) != (image.width, image.height) {
        return Err(StageError::Protocol(format!(
            "{role} returned {w}x{h} for a {}x{} image",
            image.width, image.height
        )));
    }
    let asset = store.put_image(
        &bytes,
        ImageOrigin::Perturbed {
            parent_image_id: image.id.clone(),
            method,
        },
    )?;
    Ok((asset, reply.backend))
}

pub fn remove_object(
    backends: &Backends,
    store: &ImageStore,
    image: &ImageAsset,
    mask: &MaskAsset,
) -> Result<(ImageAsset, String), StageError> {
    perturb_with(
        backends,
        store,
        BackendRole::Inpainter,
        String::new(),
        image,
        mask,
        PerturbationMethod::ObjectRemoval,
    )
}

#[derive(Debug, Clone)]
pub struct InfillOutput {
    pub asset: ImageAsset,
    pub new_value: String,
    pub backend: String,
}

#[allow(clippy::too_many_arguments)]
pub fn modify_attribute(
    backends: &Backends,
    store: &ImageStore,
    image: &ImageAsset,
    mask: &MaskAsset,
    noun: &str,
    attribute: Attribute,
    original_value: &str,
    seed: u64,
    vocab: &CategoryVocabulary,
    template: &str,
) -> Result<InfillOutput, StageError> {
    if !vocab.contains(attribute.category(), original_value) {
        return Err(StageError::Precondition(format!(
            "{original_value:?} is not a {} token",
            attribute.as_str()
        )));
    }
    let new_value = draw_new_value(attribute, original_value, seed, vocab)?;
    let prompt = template
        .replace("{new_value}", &new_value)
        .replace("{noun}", noun);
    let (asset, backend) = perturb_with(
        backends,
        store,
        BackendRole::Infiller,
        prompt,
        image,
        mask,
        PerturbationMethod::AttributeInfill {
            attribute,
            original_value: original_value.to_string(),
            new_value: new_value.clone(),
        },
    )?;
    Ok(InfillOutput {
        asset,
        new_value,
        backend,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub extractor_template: String,
    pub infill_template: String,
    #[serde(default)]
    pub vocab: CategoryVocabulary,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            extractor_template: EXTRACTOR_TEMPLATE.to_string(),
            infill_template: INFILL_TEMPLATE.to_string(),
            vocab: CategoryVocabulary::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineSkip {
    pub sample_id: String,
    pub image_index: usize,
    pub stage: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct YieldRow {
    pub dataset: Dataset,
    pub family: TargetFamily,
    pub plans: usize,
    pub records: usize,
    pub skips: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct YieldReport {
    pub plans: usize,
    pub records: usize,
    pub skips: usize,
    pub rows: Vec<YieldRow>,
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOutput {
    pub records: Vec<PerturbationRecord>,
    pub skips: Vec<PipelineSkip>,
    pub report: YieldReport,
}

/// Roles a set of plans needs.
pub fn required_roles(plans: &[PerturbPlan]) -> Vec<BackendRole> {
    let mut roles = vec![BackendRole::ObjectExtractor, BackendRole::Segmenter];
    if plans.iter().any(|p| p.family == TargetFamily::Counterfactual) {
        roles.push(BackendRole::Inpainter);
    }
    if plans.iter().any(|p| p.family == TargetFamily::Parametric) {
        roles.push(BackendRole::Infiller);
    }
    roles
}

fn run_plan(
    plan: &PerturbPlan,
    samples: &BTreeMap<&str, &Sample>,
    backends: &Backends,
    store: &ImageStore,
    config: &PipelineConfig,
) -> Result<PerturbationRecord, (String, StageError)> {
    let fail = |stage: &str| {
        let stage = stage.to_string();
        move |e: StageError| (stage, e)
    };
    let sample = samples
        .get(plan.sample_id.as_str())
        .ok_or_else(|| ("plan".to_string(), StageError::Precondition("unknown sample".into())))?;
    let image_id = sample
        .images
        .get(plan.image_index)
        .ok_or_else(|| ("plan".to_string(), StageError::Precondition("image index out of range".into())))?;
    let image = store.image(image_id).map_err(|e| ("plan".to_string(), e.into()))?;

    let (noun, extractor) = extract_object(backends, &sample.question, &config.extractor_template, &sample.id)
        .map_err(fail("extract"))?;
    let (mask, segmenter) = segment_object(backends, store, &image, &noun).map_err(fail("segment"))?;

    let mut attribution = BTreeMap::new();
    attribution.insert(BackendRole::ObjectExtractor.as_str().to_string(), extractor);
    attribution.insert(BackendRole::Segmenter.as_str().to_string(), segmenter);

    let (asset, method) = match plan.family {
        TargetFamily::Counterfactual => {
            let (asset, backend) = remove_object(backends, store, &image, &mask).map_err(fail("remove"))?;
            attribution.insert(BackendRole::Inpainter.as_str().to_string(), backend);
            (asset, PerturbationMethod::ObjectRemoval)
        }
        TargetFamily::Parametric => {
            let (Some(attribute), Some(original)) = (plan.attribute, plan.original_value.as_deref()) else {
                return Err(("plan".into(), StageError::Precondition("infill plan without attribute".into())));
            };
            let out = modify_attribute(
                backends,
                store,
                &image,
                &mask,
                &noun,
                attribute,
                original,
                plan.seed,
                &config.vocab,
                &config.infill_template,
            )
            .map_err(fail("infill"))?;
            attribution.insert(BackendRole::Infiller.as_str().to_string(), out.backend);
            let method = out.asset.origin.clone();
            let ImageOrigin::Perturbed { method, .. } = method else {
                unreachable!("infill output is perturbed")
            };
            (out.asset, method)
        }
    };
    Ok(PerturbationRecord {
        id: PerturbationRecord::make_id(&plan.sample_id, plan.image_index),
        sample_id: plan.sample_id.clone(),
        image_index: plan.image_index,
        source_image_id: image.id,
        perturbed_image_id: asset.id,
        object_noun: noun,
        mask_id: mask.id,
        method,
        backend_attribution: attribution,
        quality: Quality::Pending,
    })
}

/// Run every plan; plans run concurrently, stages within a plan in order.
///
/// Fails up front, with no side effects, if a needed role is not configured.
pub fn run_pipeline(
    plans: &[PerturbPlan],
    samples: &[Sample],
    backends: &Backends,
    store: &ImageStore,
    config: &PipelineConfig,
    mode: Parallelism,
) -> Result<PipelineOutput, BackendError> {
    backends.require(&required_roles(plans))?;
    let by_id: BTreeMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let results = exec::map(mode, plans, |p| run_plan(p, &by_id, backends, store, config));

    let mut out = PipelineOutput::default();
    let mut rows: BTreeMap<(Dataset, TargetFamily), YieldRow> = BTreeMap::new();
    for (plan, result) in plans.iter().zip(results) {
        let dataset = by_id
            .get(plan.sample_id.as_str())
            .map(|s| s.dataset)
            .unwrap_or(Dataset::Custom);
        let row = rows.entry((dataset, plan.family)).or_insert_with(|| YieldRow {
            dataset,
            family: plan.family,
            plans: 0,
            records: 0,
            skips: 0,
        });
        row.plans += 1;
        match result {
            Ok(rec) => {
                row.records += 1;
                out.records.push(rec);
            }
            Err((stage, e)) => {
                row.skips += 1;
                log::warn!("plan {}#{} skipped at {stage}: {e}", plan.sample_id, plan.image_index);
                out.skips.push(PipelineSkip {
                    sample_id: plan.sample_id.clone(),
                    image_index: plan.image_index,
                    stage,
                    reason: e.to_string(),
                });
            }
        }
    }
    out.records.sort_by(|a, b| a.id.cmp(&b.id));
    out.skips
        .sort_by(|a, b| (&a.sample_id, a.image_index).cmp(&(&b.sample_id, b.image_index)));
    out.report = YieldReport {
        plans: plans.len(),
        records: out.records.len(),
        skips: out.skips.len(),
        rows: rows.into_values().collect(),
    };
    Ok(out)
}
