//! Building labeled conflict samples from verified perturbations.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::exec::{self, Parallelism};
use crate::model::{
    Answer, ConflictType, Dataset, PerturbationMethod, PerturbationRecord, Provenance,
    QuestionCategory, Sample,
};
use crate::qc::target_conflict;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssemblyConfig {
    pub include_originals: bool,
    pub seed: u64,
    pub negatives_per_dataset: usize,
}

impl Default for AssemblyConfig {
    fn default() -> Self {
        AssemblyConfig {
            include_originals: true,
            seed: 0,
            negatives_per_dataset: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{record}: {reason}")]
pub struct Rejection {
    pub record: String,
    pub reason: String,
}

fn reject(rec: &PerturbationRecord, reason: impl Into<String>) -> Rejection {
    Rejection {
        record: rec.id.clone(),
        reason: reason.into(),
    }
}

fn check_common(parent: &Sample, rec: &PerturbationRecord) -> Result<(), Rejection> {
    if !rec.is_pass() {
        return Err(reject(rec, "record did not pass quality checks"));
    }
    if parent.conflict != ConflictType::Original {
        return Err(reject(rec, "parent is not an original sample"));
    }
    if rec.sample_id != parent.id {
        return Err(reject(rec, "record belongs to another sample"));
    }
    if parent.images.get(rec.image_index) != Some(&rec.source_image_id) {
        return Err(reject(rec, "record image does not match the parent"));
    }
    Ok(())
}

fn derived(
    parent: &Sample,
    conflict: ConflictType,
    ordinal: usize,
    images: Vec<String>,
    expected: Answer,
    record_ids: Vec<String>,
) -> Sample {
    Sample {
        id: Sample::make_id(parent.dataset, parent.source_id(), conflict, ordinal),
        dataset: parent.dataset,
        split: parent.split,
        question: parent.question.clone(),
        category: parent.category,
        images,
        expected,
        conflict,
        provenance: Some(Provenance {
            parent_sample_id: parent.id.clone(),
            perturbation_record_ids: record_ids,
            negative: false,
        }),
    }
}

fn substituted(parent: &Sample, rec: &PerturbationRecord) -> Vec<String> {
    let mut images = parent.images.clone();
    images[rec.image_index] = rec.perturbed_image_id.clone();
    images
}

pub fn assemble_counterfactual(parent: &Sample, rec: &PerturbationRecord) -> Result<Sample, Rejection> {
    check_common(parent, rec)?;
    if rec.method != PerturbationMethod::ObjectRemoval {
        return Err(reject(rec, "counterfactual needs an object removal"));
    }
    if parent.dataset == Dataset::Webqa && parent.category != QuestionCategory::YesNo {
        return Err(reject(rec, "webqa counterfactuals come from yes/no questions only"));
    }
    Ok(derived(
        parent,
        ConflictType::Counterfactual,
        rec.image_index,
        substituted(parent, rec),
        Answer::Ret,
        vec![rec.id.clone()],
    ))
}

pub fn assemble_parametric(parent: &Sample, rec: &PerturbationRecord) -> Result<Sample, Rejection> {
    check_common(parent, rec)?;
    let PerturbationMethod::AttributeInfill {
        attribute,
        original_value,
        new_value,
    } = &rec.method
    else {
        return Err(reject(rec, "parametric needs an attribute infill"));
    };
    if parent.category != attribute.category() {
        return Err(reject(
            rec,
            format!("{} question cannot take a {} change", parent.category.as_str(), attribute.as_str()),
        ));
    }
    if parent.images.len() != 1 {
        return Err(reject(rec, "parametric samples have one image"));
    }
    if new_value == original_value {
        return Err(reject(rec, "new value equals the original"));
    }
    Ok(derived(
        parent,
        ConflictType::Parametric,
        rec.image_index,
        substituted(parent, rec),
        Answer::Text(new_value.clone()),
        vec![rec.id.clone()],
    ))
}

/// One sample per passing perturbation of a two-image parent, with the other
/// image left original.
pub fn assemble_source_conflicts(
    parent: &Sample,
    records: &[&PerturbationRecord],
) -> Result<Vec<Sample>, Rejection> {
    if parent.images.len() != 2 {
        return Err(Rejection {
            record: parent.id.clone(),
            reason: "source conflicts need a two-image parent".into(),
        });
    }
    let mut by_index: BTreeMap<usize, &PerturbationRecord> = BTreeMap::new();
    for rec in records {
        if check_common(parent, rec).is_ok() {
            by_index.entry(rec.image_index).or_insert(rec);
        }
    }
    if by_index.is_empty() {
        return Err(Rejection {
            record: parent.id.clone(),
            reason: "no passing perturbation".into(),
        });
    }
    Ok(by_index
        .into_values()
        .map(|rec| {
            derived(
                parent,
                ConflictType::SourceConflict,
                rec.image_index,
                substituted(parent, rec),
                Answer::Ret,
                vec![rec.id.clone()],
            )
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixRow {
    pub dataset: Dataset,
    pub conflict: ConflictType,
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MixReport {
    pub total: usize,
    pub conflict_samples: usize,
    pub retained_originals: usize,
    pub ret_labeled: usize,
    /// Ret-labeled share of the whole output, originals included.
    pub ret_fraction: Option<f64>,
    /// Ret-labeled share of the conflict samples alone.
    pub ret_fraction_generated: Option<f64>,
    pub rows: Vec<MixRow>,
    pub passed_records: usize,
    pub ignored_records: usize,
    pub rejections: Vec<Rejection>,
}

impl MixReport {
    pub fn of(samples: &[Sample]) -> MixReport {
        let mut rows: BTreeMap<(Dataset, ConflictType), usize> = BTreeMap::new();
        for s in samples {
            *rows.entry((s.dataset, s.conflict)).or_default() += 1;
        }
        let originals = samples.iter().filter(|s| s.conflict == ConflictType::Original).count();
        let ret = samples.iter().filter(|s| s.expected.is_ret()).count();
        let generated = samples.len() - originals;
        let ret_generated = samples
            .iter()
            .filter(|s| s.conflict != ConflictType::Original && s.expected.is_ret())
            .count();
        MixReport {
            total: samples.len(),
            conflict_samples: generated,
            retained_originals: originals,
            ret_labeled: ret,
            ret_fraction: (!samples.is_empty()).then(|| ret as f64 / samples.len() as f64),
            ret_fraction_generated: (generated > 0).then(|| ret_generated as f64 / generated as f64),
            rows: rows
                .into_iter()
                .map(|((dataset, conflict), count)| MixRow { dataset, conflict, count })
                .collect(),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AssemblyOutput {
    pub samples: Vec<Sample>,
    pub report: MixReport,
}

/// Every conflict sample the passing records support, plus (if configured)
/// their parents once each. Sorted by id.
pub fn assemble_all(
    parents: &[Sample],
    records: &[PerturbationRecord],
    config: &AssemblyConfig,
    mode: Parallelism,
) -> AssemblyOutput {
    let by_id: BTreeMap<&str, &Sample> = parents.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut rejections = Vec::new();
    let mut per_parent: BTreeMap<&str, Vec<&PerturbationRecord>> = BTreeMap::new();
    let mut passed = 0;
    for rec in records {
        if !rec.is_pass() {
            continue;
        }
        passed += 1;
        if by_id.contains_key(rec.sample_id.as_str()) {
            per_parent.entry(rec.sample_id.as_str()).or_default().push(rec);
        } else {
            rejections.push(reject(rec, "parent sample not in the manifest"));
        }
    }
    let groups: Vec<(&str, Vec<&PerturbationRecord>)> = per_parent.into_iter().collect();
    let built = exec::map(mode, &groups, |(pid, recs)| {
        let parent = by_id[pid];
        let mut samples = Vec::new();
        let mut rejected = Vec::new();
        let mut source = Vec::new();
        for rec in recs {
            let result = match target_conflict(&rec.method, parent.images.len()) {
                ConflictType::Counterfactual => assemble_counterfactual(parent, rec),
                ConflictType::Parametric => assemble_parametric(parent, rec),
                _ => {
                    source.push(*rec);
                    continue;
                }
            };
            match result {
                Ok(s) => samples.push(s),
                Err(r) => rejected.push(r),
            }
        }
        let mut usable = Vec::new();
        for rec in source {
            match check_common(parent, rec) {
                Ok(()) => usable.push(rec),
                Err(r) => rejected.push(r),
            }
        }
        if !usable.is_empty() {
            match assemble_source_conflicts(parent, &usable) {
                Ok(s) => samples.extend(s),
                Err(r) => rejected.push(r),
            }
        }
        (samples, rejected)
    });

    let mut out: BTreeMap<String, Sample> = BTreeMap::new();
    for (samples, rejected) in built {
        rejections.extend(rejected);
        for s in samples {
            if config.include_originals {
                let pid = &s.provenance.as_ref().expect("derived sample").parent_sample_id;
                let parent = by_id[pid.as_str()];
                out.entry(parent.id.clone()).or_insert_with(|| parent.clone());
            }
            out.insert(s.id.clone(), s);
        }
    }
    for r in &rejections {
        log::warn!("assembly rejected {r}");
    }
    let samples: Vec<Sample> = out.into_values().collect();
    let mut report = MixReport::of(&samples);
    report.passed_records = passed;
    report.ignored_records = records.len() - passed;
    report.rejections = rejections;
    AssemblyOutput { samples, report }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NegativeError {
    #[error("no questions to pair")]
    NoQuestions,
    #[error("no {dataset} image outside the own images of {sample}")]
    PoolTooSmall { dataset: Dataset, sample: String },
}

fn draw_seed(seed: u64, k: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((k as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Pair questions with unrelated original images of the same dataset.
///
/// Draw `k` uses question `questions[k % len]` and an image drawn uniformly
/// from that dataset's pool images minus the question's own images.
pub fn sample_negatives(
    questions: &[Sample],
    pool: &[Sample],
    seed: u64,
    n: usize,
    mode: Parallelism,
) -> Result<Vec<Sample>, NegativeError> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if questions.is_empty() {
        return Err(NegativeError::NoQuestions);
    }
    let mut images: BTreeMap<Dataset, BTreeSet<&str>> = BTreeMap::new();
    for s in pool.iter().filter(|s| s.conflict == ConflictType::Original) {
        images
            .entry(s.dataset)
            .or_default()
            .extend(s.images.iter().map(String::as_str));
    }
    let images: BTreeMap<Dataset, Vec<&str>> =
        images.into_iter().map(|(d, set)| (d, set.into_iter().collect())).collect();
    let ks: Vec<usize> = (0..n).collect();
    let drawn = exec::map(mode, &ks, |&k| {
        let q = &questions[k % questions.len()];
        let candidates: Vec<&str> = images
            .get(&q.dataset)
            .map(|v| v.iter().copied().filter(|i| !q.images.iter().any(|o| o == i)).collect())
            .unwrap_or_default();
        if candidates.is_empty() {
            return Err(NegativeError::PoolTooSmall {
                dataset: q.dataset,
                sample: q.id.clone(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(draw_seed(seed, k));
        let image = candidates[rng.random_range(0..candidates.len())];
        Ok(Sample {
            id: Sample::make_id(q.dataset, q.source_id(), ConflictType::Counterfactual, format!("neg{k}")),
            dataset: q.dataset,
            split: q.split,
            question: q.question.clone(),
            category: q.category,
            images: vec![image.to_string()],
            expected: Answer::Ret,
            conflict: ConflictType::Counterfactual,
            provenance: Some(Provenance {
                parent_sample_id: q.id.clone(),
                perturbation_record_ids: Vec::new(),
                negative: true,
            }),
        })
    });
    let mut out = drawn.into_iter().collect::<Result<Vec<_>, _>>()?;
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Attribute, Quality, Split};

    fn parent(id: &str, category: QuestionCategory, images: &[&str], label: &str) -> Sample {
        Sample {
            id: Sample::make_id(Dataset::Webqa, id, ConflictType::Original, 0),
            dataset: Dataset::Webqa,
            split: Split::Train,
            question: "q".into(),
            category,
            images: images.iter().map(|s| s.to_string()).collect(),
            expected: Answer::text(label),
            conflict: ConflictType::Original,
            provenance: None,
        }
    }

    fn record(p: &Sample, idx: usize, method: PerturbationMethod, quality: Quality) -> PerturbationRecord {
        PerturbationRecord {
            id: PerturbationRecord::make_id(&p.id, idx),
            sample_id: p.id.clone(),
            image_index: idx,
            source_image_id: p.images[idx].clone(),
            perturbed_image_id: format!("{}'", p.images[idx]),
            object_noun: "car".into(),
            mask_id: "m".into(),
            method,
            backend_attribution: BTreeMap::new(),
            quality,
        }
    }

    fn infill(orig: &str, new: &str) -> PerturbationMethod {
        PerturbationMethod::AttributeInfill {
            attribute: Attribute::Color,
            original_value: orig.into(),
            new_value: new.into(),
        }
    }

    #[test]
    fn counterfactual_substitutes_image() {
        let p = parent("1", QuestionCategory::YesNo, &["A"], "yes");
        let s = assemble_counterfactual(&p, &record(&p, 0, PerturbationMethod::ObjectRemoval, Quality::Pass)).unwrap();
        assert_eq!(s.images, vec!["A'"]);
        assert_eq!(s.expected.to_string(), "<RET>");
        let fail = record(&p, 0, PerturbationMethod::ObjectRemoval, Quality::Fail { reason: "x".into() });
        assert!(assemble_counterfactual(&p, &fail).is_err());
    }

    #[test]
    fn parametric_rules() {
        let p = parent("1", QuestionCategory::Color, &["A"], "red");
        let s = assemble_parametric(&p, &record(&p, 0, infill("red", "teal"), Quality::Pass)).unwrap();
        assert_eq!(s.expected, Answer::text("teal"));
        let yn = parent("2", QuestionCategory::YesNo, &["A"], "yes");
        assert!(assemble_parametric(&yn, &record(&yn, 0, infill("red", "teal"), Quality::Pass)).is_err());
    }

    #[test]
    fn source_combinations() {
        let p = parent("1", QuestionCategory::Color, &["A", "B"], "red");
        let r0 = record(&p, 0, infill("red", "blue"), Quality::Pass);
        let r1 = record(&p, 1, infill("red", "pink"), Quality::Pass);
        let both = assemble_source_conflicts(&p, &[&r0, &r1]).unwrap();
        assert_eq!(both.len(), 2);
        assert_eq!(both[0].images, vec!["A'", "B"]);
        assert_eq!(both[1].images, vec!["A", "B'"]);
        let r0_fail = record(&p, 0, infill("red", "blue"), Quality::Fail { reason: "x".into() });
        let one = assemble_source_conflicts(&p, &[&r0_fail, &r1]).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].images, vec!["A", "B'"]);
        let single = parent("2", QuestionCategory::Color, &["A"], "red");
        assert!(assemble_source_conflicts(&single, &[]).is_err());
    }

    #[test]
    fn originals_toggle() {
        let p = parent("1", QuestionCategory::YesNo, &["A"], "yes");
        let recs = vec![record(&p, 0, PerturbationMethod::ObjectRemoval, Quality::Pass)];
        let on = assemble_all(&[p.clone()], &recs, &AssemblyConfig::default(), Parallelism::Sequential);
        assert_eq!(on.samples.len(), 2);
        let off = AssemblyConfig {
            include_originals: false,
            ..Default::default()
        };
        let out = assemble_all(&[p], &recs, &off, Parallelism::Sequential);
        assert_eq!(out.samples.len(), 1);
        assert_eq!(out.report.ret_fraction, Some(1.0));
    }

    #[test]
    fn negatives_need_other_images() {
        let a = parent("1", QuestionCategory::YesNo, &["A"], "yes");
        assert!(matches!(
            sample_negatives(&[a.clone()], &[a.clone()], 1, 3, Parallelism::Sequential),
            Err(NegativeError::PoolTooSmall { .. })
        ));
        let b = parent("2", QuestionCategory::YesNo, &["B"], "no");
        let negs = sample_negatives(&[a.clone()], &[a, b], 1, 3, Parallelism::Sequential).unwrap();
        assert!(negs.iter().all(|s| s.images == vec!["B"] && s.is_negative()));
    }
}
