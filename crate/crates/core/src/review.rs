//! Folds over the human rating log.
//!
//! The log is append-only. When an annotator rates the same sample more than
//! once, only their latest rating counts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{ConflictType, Dataset, PerturbationRecord, QuestionCategory, ReviewRating, Sample, Verdict};
use crate::qc::quality_report;

/// Latest rating per (sample, annotator), in log order of first appearance.
pub fn effective_ratings(ratings: &[ReviewRating]) -> Vec<&ReviewRating> {
    let mut latest: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for (i, r) in ratings.iter().enumerate() {
        let slot = latest.entry((&r.sample_id, &r.annotator)).or_insert(i);
        if ratings[*slot].timestamp <= r.timestamp {
            *slot = i;
        }
    }
    let mut idx: Vec<usize> = latest.into_values().collect();
    idx.sort_unstable();
    idx.into_iter().map(|i| &ratings[i]).collect()
}

fn pct(good: usize, n: usize) -> Option<f64> {
    (n > 0).then(|| 100.0 * good as f64 / n as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub rated: usize,
    pub good: usize,
    pub pct_good: Option<f64>,
}

impl Tally {
    fn add(&mut self, good: bool) {
        self.rated += 1;
        self.good += good as usize;
        self.pct_good = pct(self.good, self.rated);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: Dataset,
    pub conflict: ConflictType,
    pub rated_samples: usize,
    pub ratings: usize,
    pub good: usize,
    pub pct_good: Option<f64>,
    /// One verdict per sample by majority; ties are left out.
    pub majority: Tally,
    pub majority_ties: usize,
    pub per_annotator: BTreeMap<String, Tally>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RatingSummary {
    pub ratings: usize,
    pub rows: Vec<SummaryRow>,
}

/// Per-(dataset, conflict) rating summary. Ratings of unknown samples are ignored.
pub fn summarize(ratings: &[ReviewRating], samples: &BTreeMap<String, Sample>) -> RatingSummary {
    let effective = effective_ratings(ratings);
    let mut rows: BTreeMap<(Dataset, ConflictType), SummaryRow> = BTreeMap::new();
    let mut votes: BTreeMap<(Dataset, ConflictType), BTreeMap<&str, (usize, usize)>> = BTreeMap::new();
    for r in &effective {
        let Some(s) = samples.get(&r.sample_id) else { continue };
        let key = (s.dataset, s.conflict);
        let good = r.verdict == Verdict::Good;
        let row = rows.entry(key).or_insert_with(|| SummaryRow {
            dataset: s.dataset,
            conflict: s.conflict,
            rated_samples: 0,
            ratings: 0,
            good: 0,
            pct_good: None,
            majority: Tally::default(),
            majority_ties: 0,
            per_annotator: BTreeMap::new(),
        });
        row.ratings += 1;
        row.good += good as usize;
        row.pct_good = pct(row.good, row.ratings);
        row.per_annotator.entry(r.annotator.clone()).or_default().add(good);
        let v = votes.entry(key).or_default().entry(&r.sample_id).or_default();
        if good {
            v.0 += 1;
        } else {
            v.1 += 1;
        }
    }
    for (key, per_sample) in votes {
        let row = rows.get_mut(&key).expect("row exists for every vote");
        row.rated_samples = per_sample.len();
        for (good, bad) in per_sample.into_values() {
            if good == bad {
                row.majority_ties += 1;
            } else {
                row.majority.add(good > bad);
            }
        }
    }
    RatingSummary {
        ratings: effective.len(),
        rows: rows.into_values().collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityTableRow {
    pub dataset: Dataset,
    pub category: QuestionCategory,
    pub conflict: ConflictType,
    pub method: String,
    pub pre_quality: usize,
    pub post_quality: usize,
    pub rated: usize,
    pub pct_good: Option<f64>,
}

/// Perturbation yield per (dataset, category, conflict, method) joined with
/// the share of Good ratings on the samples built from those records.
pub fn export_quality_table(
    ratings: &[ReviewRating],
    samples: &[Sample],
    records: &[PerturbationRecord],
) -> Vec<QualityTableRow> {
    let parents: Vec<Sample> = samples
        .iter()
        .filter(|s| s.conflict == ConflictType::Original)
        .cloned()
        .collect();
    let report = quality_report(records, &parents);
    let rec_by_id: BTreeMap<&str, &PerturbationRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let by_id: BTreeMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();

    let mut tallies: BTreeMap<(Dataset, QuestionCategory, ConflictType, String), Tally> = BTreeMap::new();
    for r in effective_ratings(ratings) {
        let Some(s) = by_id.get(r.sample_id.as_str()) else { continue };
        let Some(prov) = &s.provenance else { continue };
        let Some(rec) = prov.perturbation_record_ids.iter().find_map(|id| rec_by_id.get(id.as_str())) else {
            continue;
        };
        tallies
            .entry((s.dataset, s.category, s.conflict, rec.method.label().to_string()))
            .or_default()
            .add(r.verdict == Verdict::Good);
    }
    report
        .rows
        .into_iter()
        .map(|row| {
            let t = tallies
                .get(&(row.dataset, row.category, row.conflict, row.method.clone()))
                .cloned()
                .unwrap_or_default();
            QualityTableRow {
                dataset: row.dataset,
                category: row.category,
                conflict: row.conflict,
                method: row.method,
                pre_quality: row.pre_quality,
                post_quality: row.post_quality,
                rated: t.rated,
                pct_good: t.pct_good,
            }
        })
        .collect()
}
