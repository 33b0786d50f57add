use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use conflictkit::manifest::read_jsonl;
use conflictkit::model::Provenance;
use conflictkit::{
    synth, Answer, ConflictType, Dataset, ImageOrigin, ImageStore, PerturbationMethod,
    QuestionCategory, ReviewRating, Sample, Split,
};
use conflictkit_cli::server::{router, AppState};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

struct Fixture {
    _dir: tempfile::TempDir,
    app: Router,
    store: ImageStore,
    log: std::path::PathBuf,
    samples: Vec<Sample>,
    image: String,
}

fn sample(i: usize, image: &str, conflict: ConflictType) -> Sample {
    Sample {
        id: Sample::make_id(Dataset::Vqav2, &format!("s{i:02}"), conflict, 0),
        dataset: Dataset::Vqav2,
        split: Split::Validation,
        question: format!("What is on the table {i}?"),
        category: QuestionCategory::Open,
        images: vec![image.to_string()],
        expected: if conflict == ConflictType::Original { Answer::text("cup") } else { Answer::Ret },
        conflict,
        provenance: (conflict != ConflictType::Original).then(|| Provenance {
            parent_sample_id: Sample::make_id(Dataset::Vqav2, &format!("s{i:02}"), ConflictType::Original, 0),
            perturbation_record_ids: vec![],
            negative: false,
        }),
    }
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let store = ImageStore::open(dir.path().join("store")).unwrap();
    let orig = store
        .put_image(
            &synth::scene_png(1, 32, 32),
            ImageOrigin::Original {
                dataset: Dataset::Vqav2,
                source_id: "s00".into(),
            },
        )
        .unwrap();
    let pert = store
        .put_image(
            &synth::scene_png(2, 32, 32),
            ImageOrigin::Perturbed {
                parent_image_id: orig.id.clone(),
                method: PerturbationMethod::ObjectRemoval,
            },
        )
        .unwrap();
    let mut samples: Vec<Sample> = (0..20).map(|i| sample(i, &pert.id, ConflictType::Counterfactual)).collect();
    samples.extend((0..20).map(|i| sample(i, &orig.id, ConflictType::Original)));
    let log = dir.path().join("ratings.jsonl");
    let state = AppState::new(store.clone(), samples.clone(), vec![], vec![], log.clone()).unwrap();
    Fixture {
        app: router(state, None),
        _dir: dir,
        store,
        log,
        samples,
        image: pert.id,
    }
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Option<String>, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let ctype = resp
        .headers()
        .get(header::CONTENT_TYPE)
        .map(|v| v.to_str().unwrap().to_string());
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, ctype, body)
}

async fn get_json(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, _, b) = call(app, Request::get(uri).body(Body::empty()).unwrap()).await;
    (s, serde_json::from_slice(&b).unwrap())
}

async fn post_rating(app: &Router, id: &str, body: &str) -> (StatusCode, Value) {
    let req = Request::post(format!("/api/samples/{id}/rating"))
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let (s, _, b) = call(app, req).await;
    (s, serde_json::from_slice(&b).unwrap())
}

fn counterfactual_row(summary: &Value) -> &Value {
    summary["rows"]
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["conflict"] == "counterfactual")
        .unwrap()
}

#[tokio::test]
async fn fifteen_good_of_twenty_reads_seventy_five() {
    let f = fixture();
    let cf: Vec<&Sample> = f.samples.iter().filter(|s| s.conflict == ConflictType::Counterfactual).collect();
    for (i, s) in cf.iter().enumerate() {
        let verdict = if i < 15 { "good" } else { "bad" };
        let (status, _) = post_rating(&f.app, &s.id, &json!({"annotator": "ann", "verdict": verdict}).to_string()).await;
        assert_eq!(status, StatusCode::CREATED);
        // read-your-writes: the row reflects this rating immediately
        let (_, summary) = get_json(&f.app, "/api/summary").await;
        assert_eq!(counterfactual_row(&summary)["ratings"], i + 1);
    }
    let (_, summary) = get_json(&f.app, "/api/summary").await;
    let row = counterfactual_row(&summary);
    assert_eq!(row["rated_samples"], 20);
    assert_eq!(row["good"], 15);
    assert_eq!(row["pct_good"], 75.0);

    let logged: Vec<ReviewRating> = read_jsonl(&f.log).unwrap();
    assert_eq!(logged.len(), 20);
    // the summary is a fold over the log: a fresh service agrees
    let again = AppState::new(f.store.clone(), f.samples.clone(), vec![], logged, f.log.clone()).unwrap();
    let (_, summary2) = get_json(&router(again, None), "/api/summary").await;
    assert_eq!(summary, summary2);
}

#[tokio::test]
async fn unknown_sample_is_404_json() {
    let f = fixture();
    let (s, v) = get_json(&f.app, "/api/samples/vqav2:nope:original:0").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["error"], "not_found");
    assert!(v["detail"].as_str().unwrap().contains("nope"));
    let (s, v) = post_rating(&f.app, "vqav2:nope:original:0", r#"{"annotator":"a","verdict":"good"}"#).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["error"], "not_found");
}

#[tokio::test]
async fn malformed_ratings_are_400_json() {
    let f = fixture();
    let id = &f.samples[0].id;
    for body in [
        "",
        "{",
        r#"{"annotator":"a"}"#,
        r#"{"annotator":"a","verdict":"great"}"#,
        r#"{"annotator":"  ","verdict":"good"}"#,
        r#"{"annotator":"a","verdict":"good","score":3}"#,
    ] {
        let (s, v) = post_rating(&f.app, id, body).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{body}");
        assert_eq!(v["error"], "bad_rating");
        assert!(v["detail"].is_string());
    }
    assert_eq!(std::fs::read_to_string(&f.log).unwrap(), "");
}

#[tokio::test]
async fn sample_detail_and_images() {
    let f = fixture();
    let id = &f.samples[0].id;
    let (s, v) = get_json(&f.app, &format!("/api/samples/{id}")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["question"], f.samples[0].question);
    assert_eq!(v["expected"], json!({"ret": true}));
    assert_eq!(v["images"][0]["perturbed"], true);
    assert_eq!(v["original_images"][0]["perturbed"], false);
    assert_eq!(v["status"], "pending");

    let url = v["images"][0]["url"].as_str().unwrap().to_string();
    assert_eq!(url, format!("/api/images/{}", f.image));
    let (s, ctype, bytes) = call(&f.app, Request::get(&url).body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(ctype.as_deref(), Some("image/png"));
    let asset = f.store.image(&f.image).unwrap();
    assert_eq!(bytes, f.store.image_bytes(&asset).unwrap());

    for bad in ["/api/images/zz", "/api/images/../../etc/passwd", &format!("/api/images/{}", "0".repeat(64))] {
        let (s, _, b) = call(&f.app, Request::get(bad).body(Body::empty()).unwrap()).await;
        assert_eq!(s, StatusCode::NOT_FOUND, "{bad}");
        if bad.starts_with("/api/images/") && !bad.contains("..") {
            let v: Value = serde_json::from_slice(&b).unwrap();
            assert_eq!(v["error"], "not_found");
        }
    }
}

#[tokio::test]
async fn listing_filters_and_pages() {
    let f = fixture();
    let (_, all) = get_json(&f.app, "/api/samples").await;
    assert_eq!(all["total"], 40);
    assert_eq!(all["items"].as_array().unwrap().len(), 40);
    let (_, cf) = get_json(&f.app, "/api/samples?conflict=counterfactual&dataset=vqav2").await;
    assert_eq!(cf["total"], 20);
    let (_, none) = get_json(&f.app, "/api/samples?dataset=okvqa").await;
    assert_eq!(none["total"], 0);
    let (_, p2) = get_json(&f.app, "/api/samples?page=2").await;
    assert!(p2["items"].as_array().unwrap().is_empty());

    post_rating(&f.app, &f.samples[0].id, r#"{"annotator":"a","verdict":"bad","note":"blurry"}"#).await;
    let (_, rated) = get_json(&f.app, "/api/samples?status=rated").await;
    assert_eq!(rated["total"], 1);
    assert_eq!(rated["items"][0]["id"], f.samples[0].id);
    let (_, pending) = get_json(&f.app, "/api/samples?status=pending&conflict=counterfactual").await;
    assert_eq!(pending["total"], 19);

    for q in ["status=done", "conflict=weird", "dataset=imagenet", "page=0", "page=x"] {
        let (s, v) = get_json(&f.app, &format!("/api/samples?{q}")).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{q}");
        assert_eq!(v["error"], "bad_query");
    }
}

#[tokio::test]
async fn concurrent_posts_are_all_logged() {
    let f = fixture();
    let app = Arc::new(f.app.clone());
    let mut tasks = Vec::new();
    for k in 0..64 {
        let app = app.clone();
        let id = f.samples[k % f.samples.len()].id.clone();
        tasks.push(tokio::spawn(async move {
            let body = json!({"annotator": format!("a{k}"), "verdict": "good"}).to_string();
            post_rating(&app, &id, &body).await.0
        }));
    }
    for t in tasks {
        assert_eq!(t.await.unwrap(), StatusCode::CREATED);
    }
    let logged: Vec<ReviewRating> = read_jsonl(&f.log).unwrap();
    assert_eq!(logged.len(), 64);
    let (_, summary) = get_json(&f.app, "/api/summary").await;
    assert_eq!(summary["ratings"], 64);
}

#[tokio::test]
async fn static_assets_fall_back() {
    let f = fixture();
    let web = tempfile::tempdir().unwrap();
    std::fs::write(web.path().join("index.html"), "<!doctype html><title>review</title>").unwrap();
    let state = AppState::new(f.store.clone(), f.samples.clone(), vec![], vec![], f.log.clone()).unwrap();
    let app = router(state, Some(Path::new(web.path())));
    let (s, ctype, body) = call(&app, Request::get("/index.html").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    assert!(ctype.unwrap().starts_with("text/html"));
    assert!(String::from_utf8(body).unwrap().contains("review"));
    let (s, _) = get_json(&app, "/api/summary").await;
    assert_eq!(s, StatusCode::OK);
}
