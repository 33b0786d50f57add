//! HTTP service behind the rating UI.
//!
//! Reads are served from memory. Rating appends go through one writer that
//! appends to the JSONL log before the rating becomes visible.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use conflictkit::review::{effective_ratings, summarize};
use conflictkit::{
    ConflictType, Dataset, ImageStore, PerturbationRecord, ReviewRating, Sample, StoreError, Verdict,
};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

pub const PAGE_SIZE: usize = 50;

pub struct AppState {
    store: ImageStore,
    samples: BTreeMap<String, Sample>,
    records: BTreeMap<String, PerturbationRecord>,
    ratings: RwLock<Vec<ReviewRating>>,
    log: Mutex<File>,
}

impl AppState {
    pub fn new(
        store: ImageStore,
        samples: Vec<Sample>,
        records: Vec<PerturbationRecord>,
        ratings: Vec<ReviewRating>,
        log_path: PathBuf,
    ) -> io::Result<Arc<Self>> {
        let log = OpenOptions::new().create(true).append(true).open(&log_path)?;
        Ok(Arc::new(AppState {
            store,
            samples: samples.into_iter().map(|s| (s.id.clone(), s)).collect(),
            records: records.into_iter().map(|r| (r.id.clone(), r)).collect(),
            ratings: RwLock::new(ratings),
            log: Mutex::new(log),
        }))
    }

    fn append(&self, rating: ReviewRating) -> io::Result<()> {
        let mut line = serde_json::to_vec(&rating).map_err(io::Error::other)?;
        line.push(b'\n');
        let mut log = self.log.lock().expect("rating log lock");
        log.write_all(&line)?;
        log.flush()?;
        log.sync_data()?;
        self.ratings.write().expect("ratings lock").push(rating);
        Ok(())
    }
}

type Shared = Arc<AppState>;

fn error(status: StatusCode, error: &str, detail: impl Into<String>) -> Response {
    (status, Json(json!({"error": error, "detail": detail.into()}))).into_response()
}

pub fn router(state: Shared, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/samples", get(list_samples))
        .route("/api/samples/{id}", get(get_sample))
        .route("/api/samples/{id}/rating", post(post_rating))
        .route("/api/images/{hash}", get(get_image))
        .route("/api/summary", get(get_summary))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(|| async { error(StatusCode::NOT_FOUND, "not_found", "no such route") }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatingStatus {
    Pending,
    Rated,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SampleSummary {
    pub id: String,
    pub dataset: Dataset,
    pub conflict: ConflictType,
    pub question: String,
    pub negative: bool,
    pub status: RatingStatus,
    pub ratings: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SamplePage {
    pub page: usize,
    pub page_size: usize,
    pub total: usize,
    pub items: Vec<SampleSummary>,
}

fn parse_conflict(s: &str) -> Option<ConflictType> {
    match s {
        "source" => Some(ConflictType::SourceConflict),
        other => serde_json::from_value(json!(other)).ok(),
    }
}

fn rating_counts(ratings: &[ReviewRating]) -> HashMap<String, usize> {
    let mut out = HashMap::new();
    for r in effective_ratings(ratings) {
        *out.entry(r.sample_id.clone()).or_default() += 1;
    }
    out
}

async fn list_samples(State(st): State<Shared>, Query(q): Query<HashMap<String, String>>) -> Response {
    let status = match q.get("status").map(String::as_str).filter(|s| !s.is_empty()) {
        None => None,
        Some("pending") => Some(RatingStatus::Pending),
        Some("rated") => Some(RatingStatus::Rated),
        Some(other) => return error(StatusCode::BAD_REQUEST, "bad_query", format!("unknown status {other:?}")),
    };
    let conflict = match q.get("conflict").filter(|s| !s.is_empty()) {
        None => None,
        Some(c) => match parse_conflict(c) {
            Some(c) => Some(c),
            None => return error(StatusCode::BAD_REQUEST, "bad_query", format!("unknown conflict {c:?}")),
        },
    };
    let dataset = match q.get("dataset").filter(|s| !s.is_empty()) {
        None => None,
        Some(d) => match d.parse::<Dataset>() {
            Ok(d) => Some(d),
            Err(e) => return error(StatusCode::BAD_REQUEST, "bad_query", e),
        },
    };
    let page = match q.get("page").filter(|s| !s.is_empty()).map(|p| p.parse::<usize>()) {
        None => 1,
        Some(Ok(p)) if p >= 1 => p,
        _ => return error(StatusCode::BAD_REQUEST, "bad_query", "page must be a positive integer"),
    };
    let counts = rating_counts(&st.ratings.read().expect("ratings lock"));
    let matching: Vec<SampleSummary> = st
        .samples
        .values()
        .filter(|s| conflict.is_none_or(|c| s.conflict == c))
        .filter(|s| dataset.is_none_or(|d| s.dataset == d))
        .map(|s| {
            let n = counts.get(&s.id).copied().unwrap_or(0);
            SampleSummary {
                id: s.id.clone(),
                dataset: s.dataset,
                conflict: s.conflict,
                question: s.question.clone(),
                negative: s.is_negative(),
                status: if n == 0 { RatingStatus::Pending } else { RatingStatus::Rated },
                ratings: n,
            }
        })
        .filter(|s| status.is_none_or(|st| s.status == st))
        .collect();
    let total = matching.len();
    let items = matching
        .into_iter()
        .skip((page - 1) * PAGE_SIZE)
        .take(PAGE_SIZE)
        .collect();
    Json(SamplePage {
        page,
        page_size: PAGE_SIZE,
        total,
        items,
    })
    .into_response()
}

fn image_view(store: &ImageStore, id: &str) -> serde_json::Value {
    match store.image(id) {
        Ok(a) => json!({
            "id": a.id,
            "url": format!("/api/images/{}", a.id),
            "media": a.media,
            "width": a.width,
            "height": a.height,
            "perturbed": a.is_perturbed(),
        }),
        Err(_) => json!({"id": id, "url": format!("/api/images/{id}"), "missing": true}),
    }
}

async fn get_sample(State(st): State<Shared>, UrlPath(id): UrlPath<String>) -> Response {
    let Some(s) = st.samples.get(&id) else {
        return error(StatusCode::NOT_FOUND, "not_found", format!("unknown sample {id}"));
    };
    let parent = s.provenance.as_ref().and_then(|p| st.samples.get(&p.parent_sample_id));
    let originals = parent.map(|p| &p.images).unwrap_or(&s.images);
    let perturbations: Vec<&PerturbationRecord> = s
        .provenance
        .iter()
        .flat_map(|p| &p.perturbation_record_ids)
        .filter_map(|r| st.records.get(r))
        .collect();
    let ratings: Vec<ReviewRating> = effective_ratings(&st.ratings.read().expect("ratings lock"))
        .into_iter()
        .filter(|r| r.sample_id == id)
        .cloned()
        .collect();
    let status = if ratings.is_empty() { RatingStatus::Pending } else { RatingStatus::Rated };
    Json(json!({
        "id": s.id,
        "dataset": s.dataset,
        "split": s.split,
        "conflict": s.conflict,
        "category": s.category,
        "question": s.question,
        "expected": s.expected,
        "negative": s.is_negative(),
        "parent": s.provenance.as_ref().map(|p| &p.parent_sample_id),
        "images": s.images.iter().map(|i| image_view(&st.store, i)).collect::<Vec<_>>(),
        "original_images": originals.iter().map(|i| image_view(&st.store, i)).collect::<Vec<_>>(),
        "perturbations": perturbations,
        "status": status,
        "ratings": ratings,
    }))
    .into_response()
}

fn is_content_id(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

async fn get_image(State(st): State<Shared>, UrlPath(hash): UrlPath<String>) -> Response {
    if !is_content_id(&hash) {
        return error(StatusCode::NOT_FOUND, "not_found", format!("unknown image {hash}"));
    }
    let asset = match st.store.image(&hash) {
        Ok(a) => a,
        Err(StoreError::NotFound(_) | StoreError::WrongKind { .. }) => {
            return error(StatusCode::NOT_FOUND, "not_found", format!("unknown image {hash}"))
        }
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, "store", e.to_string()),
    };
    match st.store.image_bytes(&asset) {
        Ok(bytes) => ([(header::CONTENT_TYPE, asset.media.mime())], bytes).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, "store", e.to_string()),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RatingBody {
    annotator: String,
    verdict: Verdict,
    #[serde(default)]
    note: Option<String>,
}

async fn post_rating(State(st): State<Shared>, UrlPath(id): UrlPath<String>, body: Bytes) -> Response {
    if !st.samples.contains_key(&id) {
        return error(StatusCode::NOT_FOUND, "not_found", format!("unknown sample {id}"));
    }
    let body: RatingBody = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, "bad_rating", e.to_string()),
    };
    if body.annotator.trim().is_empty() {
        return error(StatusCode::BAD_REQUEST, "bad_rating", "annotator is empty");
    }
    let rating = ReviewRating {
        sample_id: id,
        annotator: body.annotator.trim().to_string(),
        verdict: body.verdict,
        note: body.note.filter(|n| !n.trim().is_empty()),
        timestamp: Utc::now(),
    };
    let st2 = st.clone();
    let saved = rating.clone();
    match tokio::task::spawn_blocking(move || st2.append(saved)).await {
        Ok(Ok(())) => (StatusCode::CREATED, Json(rating)).into_response(),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, "rating_log", e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, "rating_log", e.to_string()),
    }
}

async fn get_summary(State(st): State<Shared>) -> Response {
    let ratings = st.ratings.read().expect("ratings lock");
    Json(summarize(&ratings, &st.samples)).into_response()
}
