//! Contextualization scores and their relation to counterfactual accuracy.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::backends::{BackendError, BackendRequest, BackendRole, Backends, ImageInput};
use crate::exec::{self, Parallelism};
use crate::model::Sample;
use crate::store::ImageStore;

pub const CONTEXT_SYSTEM: &str = "Rate the image-question pair with a contextualization score from 1 to 10. \
A high score means the image makes this question a natural one to ask, among all the questions someone \
could ask about it. A low score means the image gives little reason to ask it. Reply with the score only.";
pub const CONTEXT_HUMAN: &str = "<image>\nQuestion: {question}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextRecord {
    pub sample_id: String,
    pub score: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub r: f64,
    pub p: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnalysisError {
    #[error("unparsable score reply {0:?}")]
    ScoreUnparsable(String),
    #[error("zero variance in {0}")]
    DegenerateInput(&'static str),
    #[error("need at least 3 pairs, got {0}")]
    TooFew(usize),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("sample has no image")]
    NoImage,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("store error: {0}")]
    Store(String),
}

/// First integer in `text`, if it is within 1..=10.
pub fn parse_score(text: &str) -> Option<u8> {
    let digits: String = text
        .chars()
        .skip_while(|c| !c.is_ascii_digit())
        .take_while(|c| c.is_ascii_digit())
        .collect();
    let n: u32 = digits.parse().ok()?;
    (1..=10).contains(&n).then_some(n as u8)
}

/// Image shown to the judge: the first perturbed image, else the first image.
fn scored_image(store: &ImageStore, sample: &Sample) -> Result<ImageInput, AnalysisError> {
    let mut chosen = None;
    for id in &sample.images {
        let asset = store.image(id).map_err(|e| AnalysisError::Store(e.to_string()))?;
        if asset.is_perturbed() {
            chosen = Some(asset);
            break;
        }
        chosen.get_or_insert(asset);
    }
    let asset = chosen.ok_or(AnalysisError::NoImage)?;
    Ok(ImageInput {
        bytes: store
            .image_bytes(&asset)
            .map_err(|e| AnalysisError::Store(e.to_string()))?,
        media: asset.media,
        store_id: Some(asset.id),
    })
}

/// Ask the judge for a score; one retry on an unparsable reply.
pub fn score_context(
    backends: &Backends,
    store: &ImageStore,
    sample: &Sample,
) -> Result<ContextRecord, AnalysisError> {
    let image = scored_image(store, sample)?;
    let req = BackendRequest::new(BackendRole::Judge, CONTEXT_HUMAN.replace("{question}", &sample.question))
        .system(CONTEXT_SYSTEM)
        .image(image)
        .key(sample.id.clone());
    let mut last = String::new();
    for _ in 0..2 {
        last = backends
            .call(BackendRole::Judge, req.clone())?
            .text
            .unwrap_or_default();
        if let Some(score) = parse_score(&last) {
            return Ok(ContextRecord {
                sample_id: sample.id.clone(),
                score,
            });
        }
    }
    Err(AnalysisError::ScoreUnparsable(last))
}

#[derive(Debug, Clone, Default)]
pub struct ScoringOutput {
    pub records: Vec<ContextRecord>,
    pub failures: Vec<(String, String)>,
}

pub fn score_all(
    backends: &Backends,
    store: &ImageStore,
    samples: &[Sample],
    mode: Parallelism,
) -> ScoringOutput {
    let mut ordered: Vec<&Sample> = samples.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));
    let results = exec::map(mode, &ordered, |s| score_context(backends, store, s));
    let mut out = ScoringOutput::default();
    for (s, r) in ordered.iter().zip(results) {
        match r {
            Ok(rec) => out.records.push(rec),
            Err(e) => out.failures.push((s.id.clone(), e.to_string())),
        }
    }
    out
}

/// Two-sided p-value of the t test for a Pearson coefficient.
pub fn pearson_p(r: f64, n: usize) -> f64 {
    if r.abs() >= 1.0 {
        return 0.0;
    }
    let df = (n - 2) as f64;
    let t = r * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
    (2.0 * dist.cdf(-t.abs())).min(1.0)
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<CorrelationResult, AnalysisError> {
    if xs.len() != ys.len() {
        return Err(AnalysisError::LengthMismatch(xs.len(), ys.len()));
    }
    let n = xs.len();
    if n < 3 {
        return Err(AnalysisError::TooFew(n));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(AnalysisError::DegenerateInput("xs"));
    }
    if syy == 0.0 {
        return Err(AnalysisError::DegenerateInput("ys"));
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    Ok(CorrelationResult {
        r,
        p: pearson_p(r, n),
        n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub score: u8,
    pub n: usize,
    pub raw: Option<f64>,
    pub smoothed: Option<f64>,
}

/// Per-score accuracy for bins 1..=10 plus a centered moving average.
///
/// The average at a bin covers the present bins within the window; absent
/// bins stay absent in both series.
pub fn context_curve(
    records: &[ContextRecord],
    acknowledged: &BTreeMap<String, bool>,
    window: usize,
) -> Vec<CurvePoint> {
    let window = window.max(1);
    let mut bins = [(0usize, 0usize); 10];
    for rec in records {
        if let Some(&ack) = acknowledged.get(&rec.sample_id) {
            let b = &mut bins[rec.score as usize - 1];
            b.0 += ack as usize;
            b.1 += 1;
        }
    }
    let raw: Vec<Option<f64>> = bins
        .iter()
        .map(|&(hits, n)| (n > 0).then(|| hits as f64 / n as f64))
        .collect();
    let left = (window - 1) / 2;
    let right = window / 2;
    (0..10)
        .map(|i| {
            let smoothed = raw[i].map(|_| {
                let lo = i.saturating_sub(left);
                let hi = (i + right).min(9);
                let vals: Vec<f64> = raw[lo..=hi].iter().flatten().copied().collect();
                vals.iter().sum::<f64>() / vals.len() as f64
            });
            CurvePoint {
                score: i as u8 + 1,
                n: bins[i].1,
                raw: raw[i],
                smoothed,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub scored: usize,
    pub unparsable: usize,
    pub window: usize,
    /// Scores against per-sample acknowledgment flags.
    pub point_biserial: Option<CorrelationResult>,
    /// Bin scores against per-bin raw accuracy.
    pub binned: Option<CorrelationResult>,
    pub notes: Vec<String>,
    pub curve: Vec<CurvePoint>,
}

pub fn analyze(
    records: &[ContextRecord],
    acknowledged: &BTreeMap<String, bool>,
    unparsable: usize,
    window: usize,
) -> AnalysisReport {
    let mut notes = Vec::new();
    let (xs, ys): (Vec<f64>, Vec<f64>) = records
        .iter()
        .filter_map(|r| acknowledged.get(&r.sample_id).map(|&a| (r.score as f64, a as u8 as f64)))
        .unzip();
    let point_biserial = pearson(&xs, &ys)
        .map_err(|e| notes.push(format!("point-biserial: {e}")))
        .ok();
    let curve = context_curve(records, acknowledged, window);
    let (bx, by): (Vec<f64>, Vec<f64>) = curve
        .iter()
        .filter_map(|p| p.raw.map(|a| (p.score as f64, a)))
        .unzip();
    let binned = pearson(&bx, &by)
        .map_err(|e| notes.push(format!("binned: {e}")))
        .ok();
    AnalysisReport {
        scored: records.len(),
        unparsable,
        window,
        point_biserial,
        binned,
        notes,
        curve,
    }
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("score,n,raw,smoothed\n");
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for p in points {
        let _ = writeln!(out, "{},{},{},{}", p.score, p.n, fmt(p.raw), fmt(p.smoothed));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_parsing() {
        assert_eq!(parse_score("7"), Some(7));
        assert_eq!(parse_score("Score: 10."), Some(10));
        assert_eq!(parse_score("eleven"), None);
        assert_eq!(parse_score("11"), None);
        assert_eq!(parse_score("0"), None);
        assert_eq!(parse_score("about 3 or 4"), Some(3));
    }

    #[test]
    fn pearson_examples() {
        let r = pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
        assert_eq!(r.r, -1.0);
        assert_eq!(r.p, 0.0);
        let r = pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r.r - 0.8).abs() < 1e-12);
        assert_eq!(
            pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(AnalysisError::DegenerateInput("xs"))
        );
        assert_eq!(pearson(&[1.0, 2.0], &[1.0, 2.0]), Err(AnalysisError::TooFew(2)));
    }

    fn recs(scores: &[(u8, bool)]) -> (Vec<ContextRecord>, BTreeMap<String, bool>) {
        let records = scores
            .iter()
            .enumerate()
            .map(|(i, (s, _))| ContextRecord {
                sample_id: format!("s{i}"),
                score: *s,
            })
            .collect();
        let flags = scores
            .iter()
            .enumerate()
            .map(|(i, (_, a))| (format!("s{i}"), *a))
            .collect();
        (records, flags)
    }

    #[test]
    fn curve_smoothing() {
        let (r, f) = recs(&[(1, true), (2, false), (3, true)]);
        let c = context_curve(&r, &f, 3);
        assert_eq!(c[1].smoothed, Some(2.0 / 3.0));
        assert_eq!(c[3].raw, None);
        assert_eq!(c[3].smoothed, None);
        let identity = context_curve(&r, &f, 1);
        assert!(identity.iter().all(|p| p.raw == p.smoothed));
        let (r, f) = recs(&[(1, true), (5, true), (9, true), (9, true)]);
        assert!(context_curve(&r, &f, 3)
            .iter()
            .filter(|p| p.n > 0)
            .all(|p| p.raw == Some(1.0) && p.smoothed == Some(1.0)));
    }

    #[test]
    fn csv_shape() {
        let (r, f) = recs(&[(2, true)]);
        let csv = curve_csv(&context_curve(&r, &f, 3));
        assert_eq!(csv.lines().count(), 11);
        assert_eq!(csv.lines().nth(2), Some("2,1,1,1"));
        assert_eq!(csv.lines().nth(1), Some("1,0,,"));
    }
}
