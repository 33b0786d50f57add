//! Normalize exported VQA records into original samples.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::exec::{self, Parallelism};
use crate::model::{
    Answer, ConflictType, Dataset, ImageOrigin, QuestionCategory, Sample, Split,
};
use crate::store::ImageStore;

/// One exported QA record before normalization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRecord {
    pub source_id: String,
    pub question: String,
    pub answer: String,
    /// Image file paths, relative to the export file unless absolute.
    pub images: Vec<String>,
    pub dataset: String,
    #[serde(default = "default_split")]
    pub split: Split,
    /// Category label carried by the export, if it has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

fn default_split() -> Split {
    Split::Train
}

/// Key renames applied to each JSON object before it is read as a [`RawRecord`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldMapping {
    #[serde(default)]
    pub renames: BTreeMap<String, String>,
    /// Dataset tag for exports that do not carry one per record.
    #[serde(default)]
    pub dataset: Option<String>,
}

impl FieldMapping {
    pub fn apply(&self, mut obj: serde_json::Map<String, Value>) -> serde_json::Map<String, Value> {
        for (from, to) in &self.renames {
            if let Some(v) = obj.remove(from) {
                obj.insert(to.clone(), v);
            }
        }
        if let Some(tag) = &self.dataset {
            obj.entry("dataset").or_insert_with(|| Value::String(tag.clone()));
        }
        // numeric ids are common in exports
        if let Some(Value::Number(n)) = obj.get("source_id") {
            let s = n.to_string();
            obj.insert("source_id".into(), Value::String(s));
        }
        obj
    }
}

/// Parse one export line. Errors are reasons, recorded as skips.
pub fn parse_raw_line(line: &str, mapping: &FieldMapping) -> Result<RawRecord, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| format!("malformed json: {e}"))?;
    let Value::Object(obj) = value else {
        return Err("record is not a json object".into());
    };
    serde_json::from_value(Value::Object(mapping.apply(obj)))
        .map_err(|e| format!("malformed record: {e}"))
}

/// Read a JSONL export. Blank lines are ignored; every other line yields one entry.
pub fn read_raw_records(
    path: &Path,
    mapping: &FieldMapping,
) -> std::io::Result<Vec<Result<RawRecord, String>>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| parse_raw_line(l, mapping))
        .collect())
}

fn parse_hint(hint: &str) -> Option<QuestionCategory> {
    let h: String = hint
        .to_ascii_lowercase()
        .chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .collect();
    match h.as_str() {
        "yesno" | "yn" | "yes" => Some(QuestionCategory::YesNo),
        "color" | "colour" => Some(QuestionCategory::Color),
        "shape" => Some(QuestionCategory::Shape),
        "number" | "count" | "howmany" => Some(QuestionCategory::Number),
        "open" | "others" | "other" => Some(QuestionCategory::Open),
        _ => None,
    }
}

const AUXILIARIES: [&str; 18] = [
    "is", "are", "was", "were", "do", "does", "did", "can", "could", "has", "have", "had",
    "will", "would", "should", "may", "might", "must",
];

/// Category for a question. Non-WebQA datasets are open-domain; WebQA uses the
/// hint when present and keyword rules otherwise. `Open` for WebQA means the
/// question matched no rule.
pub fn classify_category(
    question: &str,
    dataset: Dataset,
    hint: Option<&str>,
) -> QuestionCategory {
    match dataset {
        Dataset::Vqav2 | Dataset::Okvqa => return QuestionCategory::Open,
        Dataset::Webqa | Dataset::Custom => {}
    }
    if let Some(c) = hint.and_then(parse_hint) {
        return c;
    }
    let q = question.to_lowercase();
    let words: Vec<&str> = q
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect();
    let has = |w: &str| words.contains(&w);
    if has("color") || has("colour") || has("colors") || has("colours") {
        QuestionCategory::Color
    } else if has("shape") || has("shaped") || has("shapes") {
        QuestionCategory::Shape
    } else if q.trim_start().starts_with("how many") || q.contains("number of") {
        QuestionCategory::Number
    } else if words.first().is_some_and(|w| AUXILIARIES.contains(w)) {
        QuestionCategory::YesNo
    } else {
        QuestionCategory::Open
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipEntry {
    /// Source id, or `line {n}` when the record could not be parsed.
    pub record: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestCount {
    pub dataset: Dataset,
    pub split: Split,
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub total: usize,
    pub accepted: usize,
    pub counts: Vec<IngestCount>,
    pub skipped: Vec<SkipEntry>,
    /// WebQA questions that matched no category rule.
    pub unclassified: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct IngestOutput {
    pub samples: Vec<Sample>,
    pub report: IngestReport,
}

fn ingest_one(
    record: &RawRecord,
    base_dir: &Path,
    store: &ImageStore,
) -> Result<(Sample, bool), String> {
    let dataset: Dataset = record.dataset.parse()?;
    if record.question.trim().is_empty() {
        return Err("empty question".into());
    }
    if record.source_id.trim().is_empty() {
        return Err("empty source id".into());
    }
    if record.images.is_empty() || record.images.len() > 2 {
        return Err(format!("expected 1-2 images, got {}", record.images.len()));
    }
    if record.answer.trim().is_empty() {
        return Err("empty answer".into());
    }
    if record.answer.contains(crate::model::RET_TOKEN) {
        return Err("answer contains the retrieval token".into());
    }
    let mut ids = Vec::with_capacity(record.images.len());
    for rel in &record.images {
        let path = if Path::new(rel).is_absolute() {
            PathBuf::from(rel)
        } else {
            base_dir.join(rel)
        };
        let bytes = fs::read(&path).map_err(|e| format!("unreadable image {}: {e}", path.display()))?;
        let asset = store
            .put_image(
                &bytes,
                ImageOrigin::Original {
                    dataset,
                    source_id: record.source_id.clone(),
                },
            )
            .map_err(|e| format!("image {}: {e}", path.display()))?;
        ids.push(asset.id);
    }
    let category = classify_category(&record.question, dataset, record.category.as_deref());
    let unclassified = dataset == Dataset::Webqa && category == QuestionCategory::Open;
    let sample = Sample {
        id: Sample::make_id(dataset, &record.source_id, ConflictType::Original, 0),
        dataset,
        split: record.split,
        question: record.question.trim().to_string(),
        category,
        images: ids,
        expected: Answer::Text(record.answer.trim().to_string()),
        conflict: ConflictType::Original,
        provenance: None,
    };
    Ok((sample, unclassified))
}

/// Turn raw records into original samples, copying images into the store.
///
/// Output is sorted by sample id. Every input entry is either accepted or
/// listed in `report.skipped`.
pub fn ingest(
    records: &[Result<RawRecord, String>],
    base_dir: &Path,
    store: &ImageStore,
    mode: Parallelism,
) -> IngestOutput {
    let results = exec::map(mode, records, |r| match r {
        Ok(rec) => ingest_one(rec, base_dir, store).map_err(|e| (rec.source_id.clone(), e)),
        Err(e) => Err((String::new(), e.clone())),
    });

    let mut report = IngestReport {
        total: records.len(),
        ..Default::default()
    };
    let mut samples: BTreeMap<String, Sample> = BTreeMap::new();
    let mut unclassified = BTreeSet::new();
    for (line, result) in results.into_iter().enumerate() {
        match result {
            Ok((sample, flagged)) => {
                if samples.contains_key(&sample.id) {
                    report.skipped.push(SkipEntry {
                        record: sample.source_id().to_string(),
                        reason: "duplicate source id".into(),
                    });
                    continue;
                }
                if flagged {
                    unclassified.insert(sample.id.clone());
                }
                samples.insert(sample.id.clone(), sample);
            }
            Err((source, reason)) => {
                let record = if source.is_empty() {
                    format!("line {}", line + 1)
                } else {
                    source
                };
                log::warn!("skipping record {record}: {reason}");
                report.skipped.push(SkipEntry { record, reason });
            }
        }
    }

    let mut counts: BTreeMap<(Dataset, Split), usize> = BTreeMap::new();
    for s in samples.values() {
        *counts.entry((s.dataset, s.split)).or_default() += 1;
    }
    report.accepted = samples.len();
    report.counts = counts
        .into_iter()
        .map(|((dataset, split), count)| IngestCount { dataset, split, count })
        .collect();
    report.unclassified = unclassified.into_iter().collect();
    IngestOutput {
        samples: samples.into_values().collect(),
        report,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classify_examples() {
        use QuestionCategory::*;
        assert_eq!(classify_category("What color is the dome of the mosque?", Dataset::Webqa, None), Color);
        assert_eq!(classify_category("What color is it?", Dataset::Vqav2, None), Open);
        assert_eq!(classify_category("Is there a bench in the park?", Dataset::Webqa, None), YesNo);
        assert_eq!(classify_category("What is the shape of the fountain?", Dataset::Webqa, None), Shape);
        assert_eq!(classify_category("How many towers does it have?", Dataset::Webqa, None), Number);
        assert_eq!(classify_category("Who built it?", Dataset::Webqa, None), Open);
        assert_eq!(classify_category("Who built it?", Dataset::Webqa, Some("YesNo")), YesNo);
        assert_eq!(classify_category("Anything", Dataset::Okvqa, Some("color")), Open);
    }

    #[test]
    fn mapping_renames_keys() {
        let mapping = FieldMapping {
            renames: [("qid", "source_id"), ("Q", "question"), ("A", "answer"), ("img", "images")]
                .into_iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
            dataset: Some("webqa".into()),
        };
        let r = parse_raw_line(r#"{"qid": 12, "Q": "Is it red?", "A": "yes", "img": ["a.png"]}"#, &mapping).unwrap();
        assert_eq!(r.source_id, "12");
        assert_eq!(r.dataset, "webqa");
        assert_eq!(r.split, Split::Train);
        assert!(parse_raw_line("{nope", &mapping).is_err());
        assert!(parse_raw_line("[1]", &mapping).is_err());
    }

    #[test]
    fn empty_stream() {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::open(dir.path().join("store")).unwrap();
        let out = ingest(&[], dir.path(), &store, Parallelism::Sequential);
        assert!(out.samples.is_empty());
        assert_eq!(out.report.total, 0);
        assert_eq!(out.report.accepted, 0);
        assert!(out.report.counts.is_empty());
    }
}
