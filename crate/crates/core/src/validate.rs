//! Label and lineage rules every manifest sample must satisfy.

use std::collections::BTreeMap;

use crate::model::{
    Answer, ConflictType, Dataset, ImageAsset, PerturbationMethod, PerturbationRecord,
    QuestionCategory, Sample, RET_TOKEN,
};
use crate::store::ImageStore;

/// Where validation looks up images and perturbation records.
pub trait Catalog {
    fn image(&self, id: &str) -> Option<ImageAsset>;

    fn record(&self, _id: &str) -> Option<&PerturbationRecord> {
        None
    }
}

impl Catalog for ImageStore {
    fn image(&self, id: &str) -> Option<ImageAsset> {
        ImageStore::image(self, id).ok()
    }
}

impl Catalog for BTreeMap<String, ImageAsset> {
    fn image(&self, id: &str) -> Option<ImageAsset> {
        self.get(id).cloned()
    }
}

/// A store plus the perturbation records of a run.
pub struct StoreCatalog<'a> {
    pub store: &'a ImageStore,
    pub records: BTreeMap<&'a str, &'a PerturbationRecord>,
}

impl<'a> StoreCatalog<'a> {
    pub fn new(store: &'a ImageStore, records: &'a [PerturbationRecord]) -> Self {
        StoreCatalog {
            store,
            records: records.iter().map(|r| (r.id.as_str(), r)).collect(),
        }
    }
}

impl Catalog for StoreCatalog<'_> {
    fn image(&self, id: &str) -> Option<ImageAsset> {
        self.store.image(id).ok()
    }

    fn record(&self, id: &str) -> Option<&PerturbationRecord> {
        self.records.get(id).copied()
    }
}

/// Every violated rule, as a message. Empty means valid.
pub fn validate_sample(s: &Sample, catalog: &dyn Catalog) -> Vec<String> {
    let mut v = Vec::new();
    if s.question.trim().is_empty() {
        v.push("question is empty".to_string());
    }
    if s.images.is_empty() || s.images.len() > 2 {
        v.push(format!("expected 1-2 images, found {}", s.images.len()));
    }
    if let Answer::Text(t) = &s.expected {
        if t.contains(RET_TOKEN) {
            v.push("text label contains the retrieval token".into());
        }
    }
    if matches!(s.dataset, Dataset::Vqav2 | Dataset::Okvqa) && s.category != QuestionCategory::Open {
        v.push(format!("{} samples must be open category", s.dataset));
    }

    let mut perturbed = 0;
    for id in &s.images {
        match catalog.image(id) {
            Some(a) => perturbed += a.is_perturbed() as usize,
            None => v.push(format!("unknown image {id}")),
        }
    }

    match (s.conflict, &s.provenance) {
        (ConflictType::Original, Some(_)) => v.push("original must not carry provenance".into()),
        (ConflictType::Original, None) => {}
        (_, None) => v.push("derived sample must carry provenance".into()),
        (_, Some(_)) => {}
    }

    match s.conflict {
        ConflictType::Original => {
            if perturbed > 0 {
                v.push("original images must all be unperturbed".into());
            }
            if s.expected.is_ret() {
                v.push("original must carry a text label".into());
            }
        }
        ConflictType::Counterfactual => {
            if !s.expected.is_ret() {
                v.push("counterfactual must be Ret".into());
            }
        }
        ConflictType::SourceConflict => {
            if !s.expected.is_ret() {
                v.push("source conflict must be Ret".into());
            }
            if s.images.len() != 2 {
                v.push("source conflict needs exactly 2 images".into());
            }
            if perturbed != 1 {
                v.push("exactly one perturbed image".into());
            }
        }
        ConflictType::Parametric => check_parametric(s, catalog, &mut v),
    }
    v
}

fn check_parametric(s: &Sample, catalog: &dyn Catalog, v: &mut Vec<String>) {
    if !matches!(s.category, QuestionCategory::Color | QuestionCategory::Shape) {
        v.push("parametric needs a color or shape question".into());
    }
    let Answer::Text(label) = &s.expected else {
        v.push("parametric must carry a text label".into());
        return;
    };
    let Some(prov) = &s.provenance else { return };
    for rid in &prov.perturbation_record_ids {
        let Some(rec) = catalog.record(rid) else { continue };
        match &rec.method {
            PerturbationMethod::AttributeInfill {
                original_value,
                new_value,
                ..
            } => {
                if label != new_value {
                    v.push("parametric label must be the infill new value".into());
                }
                if label == original_value {
                    v.push("parametric label equals the original value".into());
                }
            }
            PerturbationMethod::ObjectRemoval => {
                v.push("parametric sample built from a removal record".into())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ImageOrigin, MediaType, Provenance, Split};

    fn asset(id: &str, parent: Option<&str>) -> ImageAsset {
        ImageAsset {
            id: id.into(),
            media: MediaType::Png,
            width: 4,
            height: 4,
            origin: match parent {
                None => ImageOrigin::Original {
                    dataset: Dataset::Webqa,
                    source_id: "1".into(),
                },
                Some(p) => ImageOrigin::Perturbed {
                    parent_image_id: p.into(),
                    method: PerturbationMethod::ObjectRemoval,
                },
            },
        }
    }

    fn catalog() -> BTreeMap<String, ImageAsset> {
        [asset("a", None), asset("b", None), asset("a2", Some("a")), asset("b2", Some("b"))]
            .into_iter()
            .map(|a| (a.id.clone(), a))
            .collect()
    }

    fn sample(conflict: ConflictType, images: &[&str], expected: Answer) -> Sample {
        Sample {
            id: Sample::make_id(Dataset::Webqa, "1", conflict, 0),
            dataset: Dataset::Webqa,
            split: Split::Train,
            question: "Is the car red?".into(),
            category: QuestionCategory::YesNo,
            images: images.iter().map(|s| s.to_string()).collect(),
            expected,
            conflict,
            provenance: (conflict != ConflictType::Original).then(|| Provenance {
                parent_sample_id: "webqa:1:original:0".into(),
                perturbation_record_ids: vec![],
                negative: false,
            }),
        }
    }

    #[test]
    fn source_conflict_ok() {
        let s = sample(ConflictType::SourceConflict, &["a", "b2"], Answer::Ret);
        assert!(validate_sample(&s, &catalog()).is_empty());
    }

    #[test]
    fn counterfactual_text_label() {
        let s = sample(ConflictType::Counterfactual, &["a2"], Answer::text("yes"));
        assert_eq!(validate_sample(&s, &catalog()), vec!["counterfactual must be Ret"]);
    }

    #[test]
    fn source_conflict_both_perturbed() {
        let s = sample(ConflictType::SourceConflict, &["a2", "b2"], Answer::Ret);
        assert_eq!(validate_sample(&s, &catalog()), vec!["exactly one perturbed image"]);
        let s = sample(ConflictType::SourceConflict, &["a", "b"], Answer::Ret);
        assert_eq!(validate_sample(&s, &catalog()), vec!["exactly one perturbed image"]);
    }

    #[test]
    fn original_rules() {
        let mut s = sample(ConflictType::Original, &["a2"], Answer::text("yes"));
        assert_eq!(validate_sample(&s, &catalog()), vec!["original images must all be unperturbed"]);
        s.images = vec!["a".into()];
        s.provenance = Some(Provenance {
            parent_sample_id: "x".into(),
            perturbation_record_ids: vec![],
            negative: false,
        });
        assert_eq!(validate_sample(&s, &catalog()), vec!["original must not carry provenance"]);
        s.provenance = None;
        s.images = vec!["zz".into()];
        assert_eq!(validate_sample(&s, &catalog()), vec!["unknown image zz"]);
    }
}
