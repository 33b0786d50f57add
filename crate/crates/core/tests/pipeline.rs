use conflictkit::assembly::{assemble_all, sample_negatives, AssemblyConfig};
use conflictkit::backends::{
    mock_suite, BackendRequest, BackendRole, Backends, MockSegmenter, RawReply, RetryPolicy,
    SlotConfig,
};
use conflictkit::backends::{Backend, CallError};
use conflictkit::ingest::{ingest, read_raw_records, FieldMapping};
use conflictkit::metrics::subject::{run_subject, PromptTemplate};
use conflictkit::metrics::{metrics_report, EvalInputs, Scorer};
use conflictkit::perturb::{
    extract_object, plan_perturbations, remove_object, run_pipeline, segment_object, PipelineConfig,
    StageError, EXTRACTOR_TEMPLATE,
};
use conflictkit::qc::qc_run;
use conflictkit::store::ImageStore;
use conflictkit::validate::{validate_sample, StoreCatalog};
use conflictkit::{synth, ConflictType, ImageOrigin, Parallelism, Quality, Sample};

struct World {
    _dir: tempfile::TempDir,
    store: ImageStore,
    samples: Vec<Sample>,
}

fn world(n: usize, seed: u64) -> World {
    let dir = tempfile::tempdir().unwrap();
    let export = dir.path().join("export");
    synth::write_export(&export, n, seed, 48).unwrap();
    let records = read_raw_records(&export.join("records.jsonl"), &FieldMapping::default()).unwrap();
    let store = ImageStore::open(dir.path().join("store")).unwrap();
    let out = ingest(&records, &export, &store, Parallelism::Parallel);
    assert_eq!(out.report.accepted, n);
    World {
        _dir: dir,
        store,
        samples: out.samples,
    }
}

fn cfg() -> SlotConfig {
    SlotConfig {
        max_in_flight: 4,
        retry: RetryPolicy::no_delay(2),
    }
}

#[test]
fn full_mock_run_is_consistent() {
    let w = world(48, 3);
    let backends = mock_suite(11);
    let config = PipelineConfig::default();
    let (plans, unplanned) = plan_perturbations(&w.samples, 7, &config.vocab);
    // number questions (1 in 8) get no plan
    assert_eq!(unplanned.len(), 6);
    let out = run_pipeline(&plans, &w.samples, &backends, &w.store, &config, Parallelism::Parallel).unwrap();
    assert_eq!(out.report.plans, out.report.records + out.report.skips);
    assert_eq!(out.report.skips, 0);
    for rec in &out.records {
        let chain = w.store.lineage(&rec.perturbed_image_id).unwrap();
        assert!(matches!(chain.last().unwrap().origin, ImageOrigin::Original { .. }));
        assert_eq!(rec.backend_attribution.len(), 3);
    }

    let qc = qc_run(&out.records, &w.samples, &backends, &w.store, &config.vocab, Parallelism::Parallel).unwrap();
    assert_eq!(qc.report.pre_quality, qc.report.post_quality + qc.report.failed + qc.report.pending);
    assert!(qc.report.post_quality > 0);
    assert_eq!(qc.report.pending, 0);

    let assembled = assemble_all(&w.samples, &qc.records, &AssemblyConfig::default(), Parallelism::Parallel);
    assert!(assembled.report.rejections.is_empty(), "{:?}", assembled.report.rejections);
    let catalog = StoreCatalog::new(&w.store, &qc.records);
    for s in &assembled.samples {
        assert_eq!(validate_sample(s, &catalog), Vec::<String>::new(), "{}", s.id);
    }

    let negs = sample_negatives(&w.samples, &w.samples, 5, 30, Parallelism::Parallel).unwrap();
    assert_eq!(negs.len(), 30);
    for s in &negs {
        assert!(validate_sample(s, &catalog).is_empty());
    }

    let mut all = assembled.samples.clone();
    all.extend(negs);
    let responses = run_subject(&backends, &w.store, &all, &PromptTemplate::default(), "mock", Parallelism::Parallel);
    assert_eq!(responses.len(), all.len());
    let inputs = EvalInputs::new(&all, &responses).with_records(&qc.records);
    let report = metrics_report(&inputs, &Scorer::default(), Parallelism::Parallel);
    assert_eq!(report.samples, all.len());
    assert_eq!(report.missing_responses, 0);
    assert!(report.rows.iter().all(|r| r.value.is_some_and(|v| (0.0..=1.0).contains(&v))));
}

#[test]
fn modes_give_identical_outputs() {
    let w = world(24, 9);
    let backends = mock_suite(2);
    let config = PipelineConfig::default();
    let (plans, _) = plan_perturbations(&w.samples, 1, &config.vocab);
    let a = run_pipeline(&plans, &w.samples, &backends, &w.store, &config, Parallelism::Sequential).unwrap();
    let b = run_pipeline(&plans, &w.samples, &backends, &w.store, &config, Parallelism::Parallel).unwrap();
    assert_eq!(a.records, b.records);
}

#[test]
fn empty_segmentation_becomes_a_skip() {
    let w = world(8, 4);
    // three yes/no or open plans; one noun segments to nothing
    let picked: Vec<Sample> = w
        .samples
        .iter()
        .filter(|s| s.images.len() == 1)
        .take(3)
        .cloned()
        .collect();
    let config = PipelineConfig::default();
    let (plans, _) = plan_perturbations(&picked, 1, &config.vocab);
    assert_eq!(plans.len(), 3);
    let mut backends = mock_suite(1);
    let target = extract_object(&backends, &picked[0].question, EXTRACTOR_TEMPLATE, "k").unwrap().0;
    let mut seg = MockSegmenter::default();
    seg.empty_nouns.insert(target.clone());
    backends.insert(BackendRole::Segmenter, std::sync::Arc::new(seg), cfg());
    let out = run_pipeline(&plans, &picked, &backends, &w.store, &config, Parallelism::Sequential).unwrap();
    let expected_skips = picked
        .iter()
        .filter(|s| extract_object(&backends, &s.question, EXTRACTOR_TEMPLATE, "k").unwrap().0 == target)
        .count();
    assert_eq!(out.skips.len(), expected_skips);
    assert_eq!(out.records.len() + out.skips.len(), 3);
    assert!(out.skips.iter().all(|s| s.stage == "segment" && s.reason.contains("empty")));
}

#[test]
fn missing_role_fails_before_work() {
    let w = world(8, 4);
    let config = PipelineConfig::default();
    let (plans, _) = plan_perturbations(&w.samples, 1, &config.vocab);
    let backends = Backends::new();
    assert!(run_pipeline(&plans, &w.samples, &backends, &w.store, &config, Parallelism::Sequential).is_err());
}

struct WrongSize;

impl Backend for WrongSize {
    fn name(&self) -> &str {
        "wrong-size"
    }
    fn call(&self, _req: &BackendRequest) -> Result<RawReply, CallError> {
        Ok(RawReply::image(conflictkit::store::encode_mask(&synth::rect_mask(3, 3, 0, 0, 2, 2))))
    }
}

#[test]
fn segmentation_contract() {
    let dir = tempfile::tempdir().unwrap();
    let store = ImageStore::open(dir.path()).unwrap();
    let img = store
        .put_image(
            &synth::solid_png(100, 100, [10, 20, 30]),
            ImageOrigin::Original {
                dataset: conflictkit::Dataset::Custom,
                source_id: "x".into(),
            },
        )
        .unwrap();
    let square = Backends::new().with(
        BackendRole::Segmenter,
        MockSegmenter {
            rect: [0.1, 0.1, 0.2, 0.2],
            ..Default::default()
        },
        cfg(),
    );
    let (mask, _) = segment_object(&square, &store, &img, "car").unwrap();
    assert_eq!(mask.nonzero_pixel_count, 100);

    let mut empty = MockSegmenter::default();
    empty.empty_nouns.insert("car".into());
    let empty = Backends::new().with(BackendRole::Segmenter, empty, cfg());
    assert_eq!(segment_object(&empty, &store, &img, "car").unwrap_err(), StageError::SegmentationEmpty);

    let wrong = Backends::new().with(BackendRole::Segmenter, WrongSize, cfg());
    assert!(matches!(segment_object(&wrong, &store, &img, "car"), Err(StageError::Protocol(_))));

    // a mask of another image is refused before the inpainter is called
    let other = store
        .put_image(
            &synth::solid_png(100, 100, [1, 2, 3]),
            ImageOrigin::Original {
                dataset: conflictkit::Dataset::Custom,
                source_id: "y".into(),
            },
        )
        .unwrap();
    let inpaint = mock_suite(1);
    assert!(matches!(
        remove_object(&inpaint, &store, &other, &mask),
        Err(StageError::Precondition(_))
    ));
    let (a, _) = remove_object(&inpaint, &store, &img, &mask).unwrap();
    let (b, _) = remove_object(&inpaint, &store, &img, &mask).unwrap();
    assert_eq!(a.id, b.id);
}

#[test]
fn judge_outage_leaves_records_pending() {
    let w = world(8, 5);
    let backends = mock_suite(3);
    let config = PipelineConfig::default();
    let (plans, _) = plan_perturbations(&w.samples, 1, &config.vocab);
    let out = run_pipeline(&plans, &w.samples, &backends, &w.store, &config, Parallelism::Sequential).unwrap();

    struct Down;
    impl Backend for Down {
        fn name(&self) -> &str {
            "down"
        }
        fn call(&self, _req: &BackendRequest) -> Result<RawReply, CallError> {
            Err(CallError::Transient("503".into()))
        }
    }
    let mut judge_down = mock_suite(3);
    judge_down.insert(BackendRole::Judge, std::sync::Arc::new(Down), cfg());
    let first = qc_run(&out.records, &w.samples, &judge_down, &w.store, &config.vocab, Parallelism::Sequential).unwrap();
    assert_eq!(first.report.pending, out.records.len());
    assert_eq!(first.errors.len(), out.records.len());

    let second = qc_run(&first.records, &w.samples, &backends, &w.store, &config.vocab, Parallelism::Sequential).unwrap();
    assert_eq!(second.report.pending, 0);
    // idempotent on decided records
    let third = qc_run(&second.records, &w.samples, &judge_down, &w.store, &config.vocab, Parallelism::Sequential).unwrap();
    assert_eq!(third.records, second.records);
    assert!(third.errors.is_empty());
    assert!(second.records.iter().all(|r| r.quality != Quality::Pending));
    assert!(second
        .records
        .iter()
        .any(|r| r.is_pass() && ConflictType::Counterfactual == conflictkit::qc::target_conflict(&r.method, 1)));
}
