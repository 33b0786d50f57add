//! Answer matching and the evaluation metrics.
//!
//! Text answers are compared as restricted bags of words: both sides are
//! tokenized and intersected with the vocabulary of the question category,
//! and a pair counts as correct when every expected token appears in the
//! generated answer. Conflict samples whose correct answer is the retrieval
//! label are scored by acknowledgment detection instead.

pub mod ack;
pub mod subject;
pub mod vocab;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use ack::{detect_ack, AcknowledgmentLexicon, ACKNOWLEDGMENT_PHRASES};
pub use vocab::{tokenize, CategoryVocabulary};

use crate::exec::{self, Parallelism};
use crate::model::{
    ConflictType, Dataset, ModelResponse, PerturbationMethod, PerturbationRecord,
    QuestionCategory, ResponseEntry, Sample,
};

/// Tokens of `text` that fall in the category vocabulary. `Open` keeps every token.
pub fn restricted_bow(
    text: &str,
    category: QuestionCategory,
    vocab: &CategoryVocabulary,
) -> BTreeSet<String> {
    tokenize(text)
        .filter(|t| vocab.contains(category, t))
        .collect()
}

/// Indicator `bow_E ⊆ bow_G`, or `None` when the expected bag is empty.
pub fn eq_acc_indicator(
    expected: &str,
    generated: &str,
    category: QuestionCategory,
    vocab: &CategoryVocabulary,
) -> Option<bool> {
    let bow_e = restricted_bow(expected, category, vocab);
    if bow_e.is_empty() {
        return None;
    }
    let bow_g = restricted_bow(generated, category, vocab);
    Some(bow_e.is_subset(&bow_g))
}

/// Count of successes over a denominator, plus the entries left out of it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rate {
    pub hits: usize,
    pub n: usize,
    pub excluded: usize,
}

impl Rate {
    /// `None` for an empty denominator: an empty subset is absent, not zero.
    pub fn value(&self) -> Option<f64> {
        (self.n > 0).then(|| self.hits as f64 / self.n as f64)
    }

    fn merge(self, other: Rate) -> Rate {
        Rate {
            hits: self.hits + other.hits,
            n: self.n + other.n,
            excluded: self.excluded + other.excluded,
        }
    }
}

/// Mean of the indicator over pairs; pairs with an empty expected bag are excluded.
pub fn eq_acc(
    pairs: &[(&str, &str)],
    category: QuestionCategory,
    vocab: &CategoryVocabulary,
) -> Rate {
    eq_acc_with(Parallelism::Sequential, pairs, category, vocab)
}

pub fn eq_acc_with(
    mode: Parallelism,
    pairs: &[(&str, &str)],
    category: QuestionCategory,
    vocab: &CategoryVocabulary,
) -> Rate {
    exec::map(mode, pairs, |(e, g)| eq_acc_indicator(e, g, category, vocab))
        .into_iter()
        .fold(Rate::default(), |acc, ind| match ind {
            Some(ok) => Rate {
                hits: acc.hits + ok as usize,
                n: acc.n + 1,
                ..acc
            },
            None => Rate {
                excluded: acc.excluded + 1,
                ..acc
            },
        })
}

/// Scoring configuration shared by every metric.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Scorer {
    pub vocab: CategoryVocabulary,
    pub lexicon: AcknowledgmentLexicon,
}

/// Indexed view of a manifest plus the responses to it.
pub struct EvalInputs<'a> {
    samples: BTreeMap<&'a str, &'a Sample>,
    responses: BTreeMap<&'a str, &'a ModelResponse>,
    errors: BTreeSet<&'a str>,
    /// Original labels of infill records, by record id.
    infill_originals: BTreeMap<&'a str, &'a str>,
}

impl<'a> EvalInputs<'a> {
    pub fn new(samples: &'a [Sample], responses: &'a [ResponseEntry]) -> Self {
        let mut r = BTreeMap::new();
        let mut errors = BTreeSet::new();
        for entry in responses {
            match entry {
                ResponseEntry::Response(resp) => {
                    r.insert(resp.sample_id.as_str(), resp);
                }
                ResponseEntry::Error(e) => {
                    errors.insert(e.sample_id.as_str());
                }
            }
        }
        EvalInputs {
            samples: samples.iter().map(|s| (s.id.as_str(), s)).collect(),
            responses: r,
            errors,
            infill_originals: BTreeMap::new(),
        }
    }

    /// Supply perturbation records so parametric samples can recover their
    /// original label without the parent being in the manifest.
    pub fn with_records(mut self, records: &'a [PerturbationRecord]) -> Self {
        for rec in records {
            if let PerturbationMethod::AttributeInfill { original_value, .. } = &rec.method {
                self.infill_originals
                    .insert(rec.id.as_str(), original_value.as_str());
            }
        }
        self
    }

    fn subset(&self, pick: impl Fn(&Sample) -> bool) -> Vec<&'a Sample> {
        self.samples.values().copied().filter(|s| pick(s)).collect()
    }

    fn response(&self, sample_id: &str) -> Option<&'a ModelResponse> {
        if self.errors.contains(sample_id) {
            return None;
        }
        self.responses.get(sample_id).copied()
    }

    /// Label the parent sample carried before perturbation.
    pub fn original_label(&self, sample: &Sample) -> Option<&'a str> {
        let prov = sample.provenance.as_ref()?;
        if let Some(parent) = self.samples.get(prov.parent_sample_id.as_str()) {
            if let Some(t) = parent.expected.as_text() {
                return Some(t);
            }
        }
        prov.perturbation_record_ids
            .iter()
            .find_map(|id| self.infill_originals.get(id.as_str()).copied())
    }
}

fn ack_rate(inputs: &EvalInputs<'_>, subset: &[&Sample], scorer: &Scorer) -> Rate {
    subset.iter().fold(Rate::default(), |acc, s| match inputs.response(&s.id) {
        Some(r) => Rate {
            hits: acc.hits + scorer.lexicon.detect(&r.raw_text) as usize,
            n: acc.n + 1,
            ..acc
        },
        None => Rate {
            excluded: acc.excluded + 1,
            ..acc
        },
    })
}

/// Acknowledgment rate on non-negative counterfactual samples.
pub fn counterfactual_accuracy(inputs: &EvalInputs<'_>, scorer: &Scorer) -> Rate {
    let subset = inputs.subset(|s| s.conflict == ConflictType::Counterfactual && !s.is_negative());
    ack_rate(inputs, &subset, scorer)
}

/// Acknowledgment rate on randomized negative counterfactuals.
pub fn negative_accuracy(inputs: &EvalInputs<'_>, scorer: &Scorer) -> Rate {
    let subset = inputs.subset(|s| s.conflict == ConflictType::Counterfactual && s.is_negative());
    ack_rate(inputs, &subset, scorer)
}

pub fn source_accuracy(inputs: &EvalInputs<'_>, scorer: &Scorer) -> Rate {
    let subset = inputs.subset(|s| s.conflict == ConflictType::SourceConflict);
    ack_rate(inputs, &subset, scorer)
}

fn parametric_outcome(
    inputs: &EvalInputs<'_>,
    sample: &Sample,
    scorer: &Scorer,
) -> Option<(bool, bool)> {
    let response = inputs.response(&sample.id)?;
    let original = inputs.original_label(sample)?;
    let covered = eq_acc_indicator(original, &response.raw_text, sample.category, &scorer.vocab)?;
    let new_too = sample
        .expected
        .as_text()
        .and_then(|l| eq_acc_indicator(l, &response.raw_text, sample.category, &scorer.vocab))
        .unwrap_or(false);
    Some((covered, covered && new_too))
}

/// Fraction of parametric responses that still assert the original label.
pub fn parametric_response_rate(inputs: &EvalInputs<'_>, scorer: &Scorer) -> Rate {
    let subset = inputs.subset(|s| s.conflict == ConflictType::Parametric);
    parametric_rate_over(inputs, &subset, scorer)
}

fn parametric_rate_over(inputs: &EvalInputs<'_>, subset: &[&Sample], scorer: &Scorer) -> Rate {
    subset.iter().fold(Rate::default(), |acc, s| {
        match parametric_outcome(inputs, s, scorer) {
            Some((hit, _)) => Rate {
                hits: acc.hits + hit as usize,
                n: acc.n + 1,
                ..acc
            },
            None => Rate {
                excluded: acc.excluded + 1,
                ..acc
            },
        }
    })
}

/// Answer accuracy over original samples, each scored in its own category.
pub fn original_accuracy(inputs: &EvalInputs<'_>, scorer: &Scorer) -> Rate {
    let subset = inputs.subset(|s| s.conflict == ConflictType::Original);
    original_rate_over(inputs, &subset, scorer)
}

fn original_rate_over(inputs: &EvalInputs<'_>, subset: &[&Sample], scorer: &Scorer) -> Rate {
    subset.iter().fold(Rate::default(), |acc, s| {
        let ind = inputs.response(&s.id).and_then(|r| {
            s.expected
                .as_text()
                .and_then(|e| eq_acc_indicator(e, &r.raw_text, s.category, &scorer.vocab))
        });
        match ind {
            Some(ok) => Rate {
                hits: acc.hits + ok as usize,
                n: acc.n + 1,
                ..acc
            },
            None => Rate {
                excluded: acc.excluded + 1,
                ..acc
            },
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    OriginalAccuracy,
    CounterfactualAccuracy,
    NegativeCounterfactualAccuracy,
    SourceAccuracy,
    ParametricResponseRate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub dataset: Dataset,
    pub conflict: ConflictType,
    pub negative: bool,
    pub metric: MetricKind,
    pub n: usize,
    pub hits: usize,
    pub excluded: usize,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub responses: usize,
    pub response_errors: usize,
    pub missing_responses: usize,
    /// Fraction of evaluated samples whose expected answer is the retrieval label.
    pub ret_fraction: Option<f64>,
    pub rows: Vec<MetricsRow>,
    /// Parametric responses that cover both the original and the new label.
    pub both_label_responses: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_version: Option<String>,
}

/// Every metric, grouped by (dataset, conflict, negative).
pub fn metrics_report(
    inputs: &EvalInputs<'_>,
    scorer: &Scorer,
    mode: Parallelism,
) -> MetricsReport {
    let mut groups: BTreeMap<(Dataset, ConflictType, bool), Vec<&Sample>> = BTreeMap::new();
    for s in inputs.samples.values() {
        groups
            .entry((s.dataset, s.conflict, s.is_negative()))
            .or_default()
            .push(s);
    }
    let groups: Vec<_> = groups.into_iter().collect();
    let rows = exec::map(mode, &groups, |((dataset, conflict, negative), subset)| {
        let (metric, rate) = match (conflict, negative) {
            (ConflictType::Original, _) => (
                MetricKind::OriginalAccuracy,
                original_rate_over(inputs, subset, scorer),
            ),
            (ConflictType::Counterfactual, false) => (
                MetricKind::CounterfactualAccuracy,
                ack_rate(inputs, subset, scorer),
            ),
            (ConflictType::Counterfactual, true) => (
                MetricKind::NegativeCounterfactualAccuracy,
                ack_rate(inputs, subset, scorer),
            ),
            (ConflictType::SourceConflict, _) => {
                (MetricKind::SourceAccuracy, ack_rate(inputs, subset, scorer))
            }
            (ConflictType::Parametric, _) => (
                MetricKind::ParametricResponseRate,
                parametric_rate_over(inputs, subset, scorer),
            ),
        };
        MetricsRow {
            dataset: *dataset,
            conflict: *conflict,
            negative: *negative,
            metric,
            n: rate.n,
            hits: rate.hits,
            excluded: rate.excluded,
            value: rate.value(),
        }
    });

    let both_label_responses = inputs
        .samples
        .values()
        .filter(|s| s.conflict == ConflictType::Parametric)
        .filter(|s| parametric_outcome(inputs, s, scorer).is_some_and(|(_, both)| both))
        .map(|s| s.id.clone())
        .collect();

    let total = inputs.samples.len();
    let ret = inputs.samples.values().filter(|s| s.expected.is_ret()).count();
    let answered = inputs
        .samples
        .keys()
        .filter(|id| inputs.response(id).is_some())
        .count();
    let errors = inputs
        .samples
        .keys()
        .filter(|id| inputs.errors.contains(*id))
        .count();

    MetricsReport {
        samples: total,
        responses: answered,
        response_errors: errors,
        missing_responses: total - answered - errors,
        ret_fraction: (total > 0).then(|| ret as f64 / total as f64),
        rows,
        both_label_responses,
        template_version: None,
    }
}

/// Sum of rows for one metric across datasets.
pub fn overall(report: &MetricsReport, metric: MetricKind) -> Rate {
    report
        .rows
        .iter()
        .filter(|r| r.metric == metric)
        .map(|r| Rate {
            hits: r.hits,
            n: r.n,
            excluded: r.excluded,
        })
        .fold(Rate::default(), Rate::merge)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Answer, Provenance, ResponseError, Split};

    fn v() -> CategoryVocabulary {
        CategoryVocabulary::default()
    }

    fn set(xs: &[&str]) -> BTreeSet<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn restricted_bow_examples() {
        let v = v();
        assert_eq!(
            restricted_bow("The car appears blue in this image.", QuestionCategory::Color, &v),
            set(&["blue"])
        );
        assert_eq!(restricted_bow("Yes, it is.", QuestionCategory::YesNo, &v), set(&["yes"]));
        assert_eq!(
            restricted_bow("octagonal tower", QuestionCategory::Shape, &v),
            set(&["octagonal"])
        );
    }

    #[test]
    fn eq_acc_examples() {
        let v = v();
        assert_eq!(eq_acc(&[("yes", "yes")], QuestionCategory::YesNo, &v).value(), Some(1.0));
        assert_eq!(
            eq_acc(&[("yes", "Yes, it is"), ("no", "yes")], QuestionCategory::YesNo, &v).value(),
            Some(0.5)
        );
        assert_eq!(
            eq_acc_indicator("blue", "blue and white", QuestionCategory::Color, &v),
            Some(true)
        );
        let r = eq_acc(&[("maybe", "yes"), ("no", "no")], QuestionCategory::YesNo, &v);
        assert_eq!(r, Rate { hits: 1, n: 1, excluded: 1 });
        assert_eq!(eq_acc(&[], QuestionCategory::YesNo, &v).value(), None);
    }

    #[test]
    fn open_category_uses_all_tokens() {
        let v = v();
        assert_eq!(
            eq_acc_indicator("fire hydrant", "It is a red fire hydrant.", QuestionCategory::Open, &v),
            Some(true)
        );
        assert_eq!(
            eq_acc_indicator("fire hydrant", "a hydrant", QuestionCategory::Open, &v),
            Some(false)
        );
    }

    fn sample(id: &str, conflict: ConflictType, cat: QuestionCategory, expected: Answer) -> Sample {
        Sample {
            id: id.into(),
            dataset: Dataset::Webqa,
            split: Split::Validation,
            question: "q?".into(),
            category: cat,
            images: vec!["img".into()],
            expected,
            conflict,
            provenance: (conflict != ConflictType::Original).then(|| Provenance {
                parent_sample_id: "p".into(),
                perturbation_record_ids: vec![],
                negative: false,
            }),
        }
    }

    fn resp(id: &str, text: &str) -> ResponseEntry {
        ResponseEntry::Response(ModelResponse {
            sample_id: id.into(),
            model_id: "m".into(),
            raw_text: text.into(),
        })
    }

    #[test]
    fn counterfactual_three_of_four() {
        let samples: Vec<_> = (0..4)
            .map(|i| sample(&format!("c{i}"), ConflictType::Counterfactual, QuestionCategory::YesNo, Answer::Ret))
            .collect();
        let responses = vec![
            resp("c0", "<RET>"),
            resp("c1", "Sorry, I can't tell."),
            resp("c2", "It is not visible."),
            resp("c3", "Yes."),
        ];
        let inputs = EvalInputs::new(&samples, &responses);
        let r = counterfactual_accuracy(&inputs, &Scorer::default());
        assert_eq!(r.value(), Some(0.75));
        assert_eq!(source_accuracy(&inputs, &Scorer::default()).value(), None);
    }

    #[test]
    fn source_two_of_five() {
        let samples: Vec<_> = (0..5)
            .map(|i| sample(&format!("s{i}"), ConflictType::SourceConflict, QuestionCategory::Color, Answer::Ret))
            .collect();
        let responses = vec![
            resp("s0", "<RET>"),
            resp("s1", "red"),
            resp("s2", "The images do not provide enough context."),
            resp("s3", "blue"),
            resp("s4", "green"),
        ];
        let inputs = EvalInputs::new(&samples, &responses);
        assert_eq!(source_accuracy(&inputs, &Scorer::default()).value(), Some(0.4));
    }

    #[test]
    fn parametric_rate_against_original_label() {
        let mut samples = vec![sample("p", ConflictType::Original, QuestionCategory::Color, Answer::text("red"))];
        samples[0].provenance = None;
        for i in 0..3 {
            samples.push(sample(&format!("x{i}"), ConflictType::Parametric, QuestionCategory::Color, Answer::text("blue")));
        }
        let responses = vec![
            resp("p", "red"),
            resp("x0", "red"),
            resp("x1", "blue"),
            resp("x2", "the red car"),
        ];
        let inputs = EvalInputs::new(&samples, &responses);
        let r = parametric_response_rate(&inputs, &Scorer::default());
        assert_eq!((r.hits, r.n), (2, 3));

        let responses = vec![resp("x0", "blue"), resp("x1", "Blue."), resp("x2", "a blue car")];
        let inputs = EvalInputs::new(&samples, &responses);
        assert_eq!(parametric_response_rate(&inputs, &Scorer::default()).value(), Some(0.0));

        let responses = vec![resp("x0", "red and blue")];
        let inputs = EvalInputs::new(&samples, &responses);
        let rep = metrics_report(&inputs, &Scorer::default(), Parallelism::Sequential);
        assert_eq!(rep.both_label_responses, vec!["x0".to_string()]);
        assert_eq!(parametric_response_rate(&inputs, &Scorer::default()), Rate { hits: 1, n: 1, excluded: 2 });
    }

    #[test]
    fn errors_shrink_denominator() {
        let samples: Vec<_> = (0..5)
            .map(|i| sample(&format!("o{i}"), ConflictType::Original, QuestionCategory::YesNo, Answer::text("yes")))
            .collect();
        let mut responses: Vec<_> = (0..4).map(|i| resp(&format!("o{i}"), if i < 2 { "yes" } else { "no" })).collect();
        responses.push(ResponseEntry::Error(ResponseError {
            sample_id: "o4".into(),
            model_id: "m".into(),
            error: "unavailable".into(),
        }));
        let inputs = EvalInputs::new(&samples, &responses);
        let r = original_accuracy(&inputs, &Scorer::default());
        assert_eq!(r, Rate { hits: 2, n: 4, excluded: 1 });
        assert_eq!(r.value(), Some(0.5));
        let rep = metrics_report(&inputs, &Scorer::default(), Parallelism::Parallel);
        assert_eq!((rep.responses, rep.response_errors, rep.missing_responses), (4, 1, 0));
    }

    #[test]
    fn empty_report() {
        let inputs = EvalInputs::new(&[], &[]);
        let rep = metrics_report(&inputs, &Scorer::default(), Parallelism::Sequential);
        assert!(rep.rows.is_empty());
        assert_eq!(rep.ret_fraction, None);
    }
}
