//! Judge-model verification of perturbations.
//!
//! Removal is checked with a presence question over both images, where only a
//! negative answer passes. Infill is checked by asking for the attribute on the
//! perturbed image alone; it passes when the reply names the new value and not
//! the original one.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backends::{BackendError, BackendRequest, BackendRole, Backends, ImageInput};
use crate::exec::{self, Parallelism};
use crate::metrics::restricted_bow;
use crate::metrics::vocab::{tokenize, CategoryVocabulary};
use crate::model::{
    Attribute, ConflictType, Dataset, ImageAsset, PerturbationMethod, PerturbationRecord, Quality,
    QuestionCategory, Sample,
};
use crate::perturb::StageError;
use crate::store::ImageStore;

pub const REMOVAL_FRAME: &str = "<image>\nCaption: Original Image\n<image>\nCaption: Perturbed Image\nQuestion: is the {object} present in both the original image and the perturbed image?";
pub const ATTRIBUTE_FRAME: &str = "what is the {category} of the {object} in the image?";

/// Conflict family a record feeds, given the parent's image count.
pub fn target_conflict(method: &PerturbationMethod, parent_images: usize) -> ConflictType {
    match method {
        PerturbationMethod::ObjectRemoval => ConflictType::Counterfactual,
        PerturbationMethod::AttributeInfill { .. } if parent_images >= 2 => ConflictType::SourceConflict,
        PerturbationMethod::AttributeInfill { .. } => ConflictType::Parametric,
    }
}

/// Removal verdict from a judge reply: Pass iff the first token is "no".
pub fn removal_verdict(reply: &str) -> Quality {
    if tokenize(reply).next().as_deref() == Some("no") {
        Quality::Pass
    } else {
        Quality::Fail {
            reason: format!("judge reply: {reply}"),
        }
    }
}

/// Infill verdict: Pass iff the reply's attribute tokens include the new value
/// and exclude the original.
pub fn attribute_verdict(
    reply: &str,
    attribute: Attribute,
    original_value: &str,
    new_value: &str,
    vocab: &CategoryVocabulary,
) -> Quality {
    let bow = restricted_bow(reply, attribute.category(), vocab);
    let reason = if !bow.contains(new_value) {
        format!("new value {new_value:?} not named: {reply}")
    } else if bow.contains(original_value) {
        format!("original value {original_value:?} still named: {reply}")
    } else {
        return Quality::Pass;
    };
    Quality::Fail { reason }
}

fn input(store: &ImageStore, asset: &ImageAsset) -> Result<ImageInput, StageError> {
    Ok(ImageInput {
        bytes: store.image_bytes(asset)?,
        media: asset.media,
        store_id: Some(asset.id.clone()),
    })
}

fn judge_text(backends: &Backends, req: BackendRequest) -> Result<String, StageError> {
    Ok(backends.call(BackendRole::Judge, req)?.text.unwrap_or_default())
}

pub fn qc_removal(
    backends: &Backends,
    store: &ImageStore,
    original: &ImageAsset,
    perturbed: &ImageAsset,
    noun: &str,
) -> Result<Quality, StageError> {
    let ok = perturbed.parent_id() == Some(original.id.as_str())
        && matches!(
            perturbed.origin,
            crate::model::ImageOrigin::Perturbed {
                method: PerturbationMethod::ObjectRemoval,
                ..
            }
        );
    if !ok {
        return Err(StageError::Precondition("not a removal of this original".into()));
    }
    let req = BackendRequest::new(BackendRole::Judge, REMOVAL_FRAME.replace("{object}", noun))
        .image(input(store, original)?)
        .image(input(store, perturbed)?);
    Ok(removal_verdict(&judge_text(backends, req)?))
}

pub fn qc_attribute(
    backends: &Backends,
    store: &ImageStore,
    perturbed: &ImageAsset,
    noun: &str,
    vocab: &CategoryVocabulary,
) -> Result<Quality, StageError> {
    let crate::model::ImageOrigin::Perturbed {
        method:
            PerturbationMethod::AttributeInfill {
                attribute,
                original_value,
                new_value,
            },
        ..
    } = &perturbed.origin
    else {
        return Err(StageError::Precondition("not an attribute infill".into()));
    };
    let prompt = ATTRIBUTE_FRAME
        .replace("{category}", attribute.as_str())
        .replace("{object}", noun);
    let req = BackendRequest::new(BackendRole::Judge, prompt).image(input(store, perturbed)?);
    let reply = judge_text(backends, req)?;
    Ok(attribute_verdict(&reply, *attribute, original_value, new_value, vocab))
}

/// Lineage problems that make a record unusable regardless of the judge.
pub fn lineage_problem(store: &ImageStore, rec: &PerturbationRecord) -> Option<String> {
    let chain = match store.lineage(&rec.perturbed_image_id) {
        Ok(c) => c,
        Err(e) => return Some(e.to_string()),
    };
    if chain.get(1).map(|a| a.id.as_str()) != Some(rec.source_image_id.as_str()) {
        return Some("perturbed image does not derive from the source image".into());
    }
    match store.mask(&rec.mask_id) {
        Ok(m) if m.nonzero_pixel_count == 0 => Some("mask is empty".into()),
        Ok(m) if m.parent_image_id != rec.source_image_id => Some("mask belongs to another image".into()),
        Ok(_) => None,
        Err(e) => Some(e.to_string()),
    }
}

fn check_record(
    rec: &PerturbationRecord,
    backends: &Backends,
    store: &ImageStore,
    vocab: &CategoryVocabulary,
) -> Result<Quality, StageError> {
    if let Some(problem) = lineage_problem(store, rec) {
        return Ok(Quality::Fail {
            reason: format!("lineage: {problem}"),
        });
    }
    let perturbed = store.image(&rec.perturbed_image_id)?;
    match rec.method {
        PerturbationMethod::ObjectRemoval => {
            let original = store.image(&rec.source_image_id)?;
            qc_removal(backends, store, &original, &perturbed, &rec.object_noun)
        }
        PerturbationMethod::AttributeInfill { .. } => {
            qc_attribute(backends, store, &perturbed, &rec.object_noun, vocab)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityRow {
    pub dataset: Dataset,
    pub category: QuestionCategory,
    pub conflict: ConflictType,
    pub method: String,
    pub pre_quality: usize,
    pub post_quality: usize,
    pub failed: usize,
    pub pending: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityReport {
    pub pre_quality: usize,
    pub post_quality: usize,
    pub failed: usize,
    pub pending: usize,
    pub rows: Vec<QualityRow>,
}

/// Fold records into per-(dataset, category, conflict, method) counts.
pub fn quality_report(records: &[PerturbationRecord], samples: &[Sample]) -> QualityReport {
    let by_id: BTreeMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut rows: BTreeMap<(Dataset, QuestionCategory, ConflictType, &'static str), QualityRow> = BTreeMap::new();
    let mut report = QualityReport::default();
    for rec in records {
        let (dataset, category, n) = match by_id.get(rec.sample_id.as_str()) {
            Some(s) => (s.dataset, s.category, s.images.len()),
            None => (
                rec.sample_id
                    .split(':')
                    .next()
                    .and_then(|d| d.parse().ok())
                    .unwrap_or(Dataset::Custom),
                QuestionCategory::Open,
                1,
            ),
        };
        let conflict = target_conflict(&rec.method, n);
        let label = rec.method.label();
        let row = rows
            .entry((dataset, category, conflict, label))
            .or_insert_with(|| QualityRow {
                dataset,
                category,
                conflict,
                method: label.to_string(),
                pre_quality: 0,
                post_quality: 0,
                failed: 0,
                pending: 0,
            });
        row.pre_quality += 1;
        report.pre_quality += 1;
        match rec.quality {
            Quality::Pass => {
                row.post_quality += 1;
                report.post_quality += 1;
            }
            Quality::Fail { .. } => {
                row.failed += 1;
                report.failed += 1;
            }
            Quality::Pending => {
                row.pending += 1;
                report.pending += 1;
            }
        }
    }
    report.rows = rows.into_values().collect();
    report
}

#[derive(Debug, Clone, Default)]
pub struct QcOutput {
    pub records: Vec<PerturbationRecord>,
    pub report: QualityReport,
    /// Judge failures that left a record Pending.
    pub errors: Vec<(String, String)>,
}

/// Judge every Pending record. Pass/Fail records are left untouched.
pub fn qc_run(
    records: &[PerturbationRecord],
    samples: &[Sample],
    backends: &Backends,
    store: &ImageStore,
    vocab: &CategoryVocabulary,
    mode: Parallelism,
) -> Result<QcOutput, BackendError> {
    if records.iter().any(|r| r.quality == Quality::Pending) {
        backends.require(&[BackendRole::Judge])?;
    }
    let verdicts = exec::map(mode, records, |rec| {
        (rec.quality == Quality::Pending).then(|| check_record(rec, backends, store, vocab))
    });
    let mut out = QcOutput::default();
    for (rec, verdict) in records.iter().zip(verdicts) {
        let mut rec = rec.clone();
        match verdict {
            Some(Ok(q)) => rec
                .set_quality(q)
                .expect("pending record accepts a verdict"),
            Some(Err(e)) => {
                log::warn!("quality check of {} failed: {e}", rec.id);
                out.errors.push((rec.id.clone(), e.to_string()));
            }
            None => {}
        }
        out.records.push(rec);
    }
    out.records.sort_by(|a, b| a.id.cmp(&b.id));
    out.report = quality_report(&out.records, samples);
    Ok(out)
}
