use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use conflictkit::analysis::{analyze, curve_csv, score_all};
use conflictkit::assembly::{assemble_all, sample_negatives, AssemblyConfig};
use conflictkit::backends::{BackendRole, Backends};
use conflictkit::ingest::{ingest, read_raw_records, FieldMapping};
use conflictkit::manifest::{read_json, read_jsonl, write_atomic, write_json, write_jsonl};
use conflictkit::metrics::subject::run_subject;
use conflictkit::metrics::{metrics_report, AcknowledgmentLexicon, EvalInputs, Scorer};
use conflictkit::perturb::{plan_perturbations, required_roles, run_pipeline};
use conflictkit::qc::qc_run;
use conflictkit::review::export_quality_table;
use conflictkit::validate::{validate_sample, StoreCatalog};
use conflictkit::{
    synth, ConflictType, Dataset, ImageStore, Parallelism, PerturbationRecord, ResponseEntry,
    ReviewRating, Sample,
};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{mock_config_toml, read_template, LoadedConfig};
use crate::run::{run_manifest_path, sibling, verify, Run, RunManifest};
use crate::{
    AssembleArgs, Cli, CliError, Command, ContextArgs, EvalArgs, IngestArgs, MetricsArgs,
    NegativesArgs, PerturbArgs, QcArgs, QualityTableArgs, ReviewServeArgs, SynthArgs, VerifyArgs,
};

struct Ctx {
    config_path: Option<PathBuf>,
    sequential: bool,
    resume: bool,
}

impl Ctx {
    fn config(&self) -> Result<LoadedConfig, CliError> {
        let path = self
            .config_path
            .as_ref()
            .ok_or_else(|| CliError::config("this command needs --config"))?;
        LoadedConfig::load(path)
    }

    fn optional_config(&self) -> Result<Option<LoadedConfig>, CliError> {
        self.config_path.as_ref().map(|p| LoadedConfig::load(p)).transpose()
    }

    fn mode(&self, cfg: Option<&LoadedConfig>) -> Parallelism {
        if self.sequential {
            Parallelism::Sequential
        } else {
            cfg.map(LoadedConfig::parallelism).unwrap_or_default()
        }
    }

    /// Register inputs and outputs; true when the run can be skipped.
    fn prepare(&self, run: &mut Run, inputs: &[&Path], outputs: &[&Path]) -> Result<bool, CliError> {
        for i in inputs {
            run.input(i)?;
        }
        run.guard_outputs(outputs)?;
        Ok(self.resume && run.up_to_date(outputs[0]))
    }
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    let ctx = Ctx {
        config_path: cli.config,
        sequential: cli.sequential,
        resume: cli.resume,
    };
    match cli.command {
        Command::Synth(a) => synth_cmd(&ctx, a),
        Command::Ingest(a) => ingest_cmd(&ctx, a),
        Command::Perturb(a) => perturb_cmd(&ctx, a),
        Command::Qc(a) => qc_cmd(&ctx, a),
        Command::Assemble(a) => assemble_cmd(&ctx, a),
        Command::Negatives(a) => negatives_cmd(&ctx, a),
        Command::Eval(a) => eval_cmd(&ctx, a),
        Command::Metrics(a) => metrics_cmd(&ctx, a),
        Command::Context(a) => context_cmd(&ctx, a),
        Command::QualityTable(a) => quality_table_cmd(&ctx, a),
        Command::ReviewServe(a) => review_serve_cmd(&ctx, a),
        Command::Verify(a) => verify_cmd(a),
    }
}

fn read_in<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    read_jsonl(path).map_err(|e| CliError::precondition(e.to_string()))
}

/// Merge sample manifests. A repeated id must carry the same sample.
pub fn read_samples(paths: &[PathBuf]) -> Result<Vec<Sample>, CliError> {
    let mut by_id: BTreeMap<String, Sample> = BTreeMap::new();
    for p in paths {
        for s in read_in::<Sample>(p)? {
            if let Some(prev) = by_id.get(&s.id) {
                if prev != &s {
                    return Err(CliError::precondition(format!("sample {} differs between manifests", s.id)));
                }
                continue;
            }
            by_id.insert(s.id.clone(), s);
        }
    }
    Ok(by_id.into_values().collect())
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => {
            fs::create_dir_all(p).map_err(|e| CliError::runtime(format!("cannot create {}: {e}", p.display())))
        }
        _ => Ok(()),
    }
}

fn out_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    ensure_parent(path)?;
    write_jsonl(path, items)
        .map(|_| ())
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

fn out_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    ensure_parent(path)?;
    write_json(path, value)
        .map(|_| ())
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

fn open_store(cfg: &LoadedConfig) -> Result<ImageStore, CliError> {
    ImageStore::open(cfg.store_root()).map_err(|e| CliError::runtime(e.to_string()))
}

fn backends(cfg: &LoadedConfig, roles: &[BackendRole]) -> Result<Backends, CliError> {
    let b = cfg.backends()?;
    b.require(roles).map_err(|e| CliError::precondition(e.to_string()))?;
    Ok(b)
}

fn emit(m: &RunManifest) {
    println!(
        "{}",
        json!({"command": m.command, "run_id": m.run_id, "outputs": m.outputs, "counts": m.counts})
    );
}

fn skipped(run: &Run, out: &Path) {
    println!("{}", json!({"run_id": run.run_id(), "resumed": true, "output": out.display().to_string()}));
}

fn synth_cmd(ctx: &Ctx, a: SynthArgs) -> Result<(), CliError> {
    let records = a.out.join("records.jsonl");
    let config = a.out.join("config.toml");
    let mut run = Run::new("synth");
    run.arg("n", a.n).arg("size", a.size).seed(a.seed);
    if ctx.prepare(&mut run, &[], &[&records, &config])? {
        skipped(&run, &records);
        return Ok(());
    }
    let written = synth::write_export(&a.out, a.n, a.seed, a.size)
        .map_err(|e| CliError::runtime(format!("cannot write export: {e}")))?;
    write_atomic(&config, mock_config_toml("store", a.seed).as_bytes())
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", config.display())))?;
    emit(&run.finish(&[&records, &config], json!({"records": written.len()}))?);
    Ok(())
}

fn ingest_cmd(ctx: &Ctx, a: IngestArgs) -> Result<(), CliError> {
    let cfg = ctx.config()?;
    let mode = ctx.mode(Some(&cfg));
    let report_path = sibling(&a.out, "report.json");
    let mut run = Run::new("ingest");
    run.config(&cfg.config);
    let mut inputs = vec![a.input.as_path()];
    if let Some(m) = &a.mapping {
        inputs.push(m);
    }
    if ctx.prepare(&mut run, &inputs, &[&a.out, &report_path])? {
        skipped(&run, &a.out);
        return Ok(());
    }
    let mapping: FieldMapping = match &a.mapping {
        None => FieldMapping::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
        }
    };
    let raw = read_raw_records(&a.input, &mapping)
        .map_err(|e| CliError::precondition(format!("{}: {e}", a.input.display())))?;
    let base = a.input.parent().unwrap_or(Path::new("."));
    let store = open_store(&cfg)?;
    let out = ingest(&raw, base, &store, mode);
    out_jsonl(&a.out, &out.samples)?;
    out_json(&report_path, &out.report)?;
    let counts = json!({
        "total": out.report.total,
        "accepted": out.report.accepted,
        "skipped": out.report.skipped.len(),
        "unclassified": out.report.unclassified.len(),
    });
    emit(&run.finish(&[&a.out, &report_path], counts)?);
    Ok(())
}

fn perturb_cmd(ctx: &Ctx, a: PerturbArgs) -> Result<(), CliError> {
    let cfg = ctx.config()?;
    let mode = ctx.mode(Some(&cfg));
    let seed = a.seed.unwrap_or(cfg.config.seed);
    let pipeline = cfg.pipeline()?;
    let report_path = sibling(&a.out, "report.json");
    let mut run = Run::new("perturb");
    run.config(&cfg.config).seed(seed);
    if ctx.prepare(&mut run, &[&a.samples], &[&a.out, &report_path])? {
        skipped(&run, &a.out);
        return Ok(());
    }
    let samples: Vec<Sample> = read_in(&a.samples)?;
    let (plans, unplanned) = plan_perturbations(&samples, seed, &pipeline.vocab);
    // roles are checked before the store is touched, so a failure leaves nothing behind
    let backends = backends(&cfg, &required_roles(&plans))?;
    let store = open_store(&cfg)?;
    let out = run_pipeline(&plans, &samples, &backends, &store, &pipeline, mode)
        .map_err(|e| CliError::precondition(e.to_string()))?;
    out_jsonl(&a.out, &out.records)?;
    let report = json!({
        "seed": seed,
        "yield": out.report,
        "skips": out.skips,
        "unplanned": unplanned,
    });
    out_json(&report_path, &report)?;
    let counts = json!({
        "plans": out.report.plans,
        "records": out.report.records,
        "skips": out.report.skips,
        "unplanned": unplanned.len(),
    });
    emit(&run.finish(&[&a.out, &report_path], counts)?);
    Ok(())
}

fn qc_cmd(ctx: &Ctx, a: QcArgs) -> Result<(), CliError> {
    let cfg = ctx.config()?;
    let mode = ctx.mode(Some(&cfg));
    let report_path = sibling(&a.out, "report.json");
    let mut run = Run::new("qc");
    run.config(&cfg.config);
    if ctx.prepare(&mut run, &[&a.records, &a.samples], &[&a.out, &report_path])? {
        skipped(&run, &a.out);
        return Ok(());
    }
    let records: Vec<PerturbationRecord> = read_in(&a.records)?;
    let samples: Vec<Sample> = read_in(&a.samples)?;
    let backends = cfg.backends()?;
    let store = open_store(&cfg)?;
    let out = qc_run(&records, &samples, &backends, &store, &cfg.vocab(), mode)
        .map_err(|e| CliError::precondition(e.to_string()))?;
    out_jsonl(&a.out, &out.records)?;
    let errors: Vec<Value> = out
        .errors
        .iter()
        .map(|(record, error)| json!({"record": record, "error": error}))
        .collect();
    out_json(&report_path, &json!({"quality": out.report, "errors": errors}))?;
    let counts = json!({
        "pre_quality": out.report.pre_quality,
        "post_quality": out.report.post_quality,
        "failed": out.report.failed,
        "pending": out.report.pending,
    });
    emit(&run.finish(&[&a.out, &report_path], counts)?);
    Ok(())
}

fn assemble_cmd(ctx: &Ctx, a: AssembleArgs) -> Result<(), CliError> {
    let cfg = ctx.config()?;
    let mode = ctx.mode(Some(&cfg));
    let seed = a.seed.unwrap_or(cfg.config.seed);
    let report_path = sibling(&a.out, "report.json");
    let mut run = Run::new("assemble");
    run.config(&cfg.config).seed(seed).arg("no_originals", a.no_originals);
    if ctx.prepare(&mut run, &[&a.samples, &a.records], &[&a.out, &report_path])? {
        skipped(&run, &a.out);
        return Ok(());
    }
    let parents: Vec<Sample> = read_in(&a.samples)?;
    let records: Vec<PerturbationRecord> = read_in(&a.records)?;
    let config = AssemblyConfig {
        include_originals: !a.no_originals,
        seed,
        negatives_per_dataset: 0,
    };
    let out = assemble_all(&parents, &records, &config, mode);
    let store = open_store(&cfg)?;
    let catalog = StoreCatalog::new(&store, &records);
    let violations: Vec<Value> = out
        .samples
        .iter()
        .filter_map(|s| {
            let problems = validate_sample(s, &catalog);
            (!problems.is_empty()).then(|| json!({"sample": s.id, "problems": problems}))
        })
        .collect();
    out_jsonl(&a.out, &out.samples)?;
    out_json(&report_path, &json!({"seed": seed, "mix": out.report, "violations": violations}))?;
    let counts = json!({
        "samples": out.report.total,
        "conflict_samples": out.report.conflict_samples,
        "retained_originals": out.report.retained_originals,
        "violations": violations.len(),
    });
    emit(&run.finish(&[&a.out, &report_path], counts)?);
    Ok(())
}

/// Questions for negatives: originals that parent a counterfactual, or every
/// original when there is none.
fn negative_questions(samples: &[Sample]) -> Vec<Sample> {
    let parents: BTreeSet<&str> = samples
        .iter()
        .filter(|s| s.conflict == ConflictType::Counterfactual && !s.is_negative())
        .filter_map(|s| s.provenance.as_ref().map(|p| p.parent_sample_id.as_str()))
        .collect();
    let originals = samples.iter().filter(|s| s.conflict == ConflictType::Original);
    let picked: Vec<Sample> = originals.clone().filter(|s| parents.contains(s.id.as_str())).cloned().collect();
    if picked.is_empty() {
        originals.cloned().collect()
    } else {
        picked
    }
}

fn negatives_cmd(ctx: &Ctx, a: NegativesArgs) -> Result<(), CliError> {
    let cfg = ctx.optional_config()?;
    let mode = ctx.mode(cfg.as_ref());
    let seed = a.seed.or(cfg.as_ref().map(|c| c.config.seed)).unwrap_or(0);
    let mut run = Run::new("negatives");
    run.seed(seed).arg("per_dataset", a.per_dataset);
    if ctx.prepare(&mut run, &[&a.samples], &[&a.out])? {
        skipped(&run, &a.out);
        return Ok(());
    }
    let samples: Vec<Sample> = read_in(&a.samples)?;
    let questions = negative_questions(&samples);
    let mut by_dataset: BTreeMap<Dataset, Vec<Sample>> = BTreeMap::new();
    for q in questions {
        by_dataset.entry(q.dataset).or_default().push(q);
    }
    let mut out = Vec::new();
    let mut counts = BTreeMap::new();
    for (dataset, qs) in &by_dataset {
        let drawn = sample_negatives(qs, &samples, seed, a.per_dataset, mode)
            .map_err(|e| CliError::precondition(e.to_string()))?;
        counts.insert(dataset.as_str(), drawn.len());
        out.extend(drawn);
    }
    out.sort_by(|x, y| x.id.cmp(&y.id));
    out_jsonl(&a.out, &out)?;
    emit(&run.finish(&[&a.out], json!({"negatives": out.len(), "per_dataset": counts}))?);
    Ok(())
}

fn eval_cmd(ctx: &Ctx, a: EvalArgs) -> Result<(), CliError> {
    let cfg = ctx.config()?;
    let mode = ctx.mode(Some(&cfg));
    let template = match &a.template {
        Some(p) => read_template(p)?,
        None => cfg.subject_template()?,
    };
    let backends = backends(&cfg, &[BackendRole::Subject])?;
    let model_id = a
        .model_id
        .clone()
        .or_else(|| backends.name(BackendRole::Subject).map(str::to_string))
        .unwrap_or_default();
    let mut run = Run::new("eval");
    run.config(&cfg.config).arg("model_id", &model_id).arg("template", &template);
    let mut inputs: Vec<&Path> = a.samples.iter().map(PathBuf::as_path).collect();
    if let Some(t) = &a.template {
        inputs.push(t);
    }
    if ctx.prepare(&mut run, &inputs, &[&a.out])? {
        skipped(&run, &a.out);
        return Ok(());
    }
    let samples = read_samples(&a.samples)?;
    let store = open_store(&cfg)?;
    let responses = run_subject(&backends, &store, &samples, &template, &model_id, mode);
    out_jsonl(&a.out, &responses)?;
    let errors = responses.iter().filter(|r| matches!(r, ResponseEntry::Error(_))).count();
    let counts = json!({
        "responses": responses.len() - errors,
        "errors": errors,
        "model_id": model_id,
        "template_version": template.version(),
    });
    emit(&run.finish(&[&a.out], counts)?);
    Ok(())
}

/// Template version recorded by the `eval` run that wrote `responses`.
fn template_version(responses: &Path) -> Option<String> {
    let m: RunManifest = read_json(&run_manifest_path(responses)).ok()?;
    m.counts.get("template_version")?.as_str().map(str::to_string)
}

fn scorer(cfg: Option<&LoadedConfig>, strict: bool) -> Scorer {
    let mut lexicon = AcknowledgmentLexicon::default();
    lexicon.strict = strict;
    Scorer {
        vocab: cfg.map(LoadedConfig::vocab).unwrap_or_default(),
        lexicon,
    }
}

fn metrics_cmd(ctx: &Ctx, a: MetricsArgs) -> Result<(), CliError> {
    let cfg = ctx.optional_config()?;
    let mode = ctx.mode(cfg.as_ref());
    let mut run = Run::new("metrics");
    run.arg("strict", a.strict);
    if let Some(c) = &cfg {
        run.config(&c.config);
    }
    let mut inputs: Vec<&Path> = a.samples.iter().map(PathBuf::as_path).collect();
    inputs.push(&a.responses);
    if let Some(r) = &a.records {
        inputs.push(r);
    }
    if ctx.prepare(&mut run, &inputs, &[&a.out])? {
        skipped(&run, &a.out);
        return Ok(());
    }
    let samples = read_samples(&a.samples)?;
    let responses: Vec<ResponseEntry> = read_in(&a.responses)?;
    let records: Vec<PerturbationRecord> = match &a.records {
        Some(p) => read_in(p)?,
        None => Vec::new(),
    };
    let inputs = EvalInputs::new(&samples, &responses).with_records(&records);
    let mut report = metrics_report(&inputs, &scorer(cfg.as_ref(), a.strict), mode);
    report.template_version = template_version(&a.responses);
    out_json(&a.out, &report)?;
    let counts = json!({
        "samples": report.samples,
        "responses": report.responses,
        "missing_responses": report.missing_responses,
        "rows": report.rows.len(),
    });
    emit(&run.finish(&[&a.out], counts)?);
    Ok(())
}

fn context_cmd(ctx: &Ctx, a: ContextArgs) -> Result<(), CliError> {
    let cfg = ctx.config()?;
    let mode = ctx.mode(Some(&cfg));
    let backends = backends(&cfg, &[BackendRole::Judge])?;
    let report_path = sibling(&a.out, "report.json");
    let mut run = Run::new("context");
    run.config(&cfg.config).arg("window", a.window).arg("strict", a.strict);
    let mut inputs: Vec<&Path> = a.samples.iter().map(PathBuf::as_path).collect();
    inputs.push(&a.responses);
    let mut outputs: Vec<&Path> = vec![&a.out, &report_path];
    if let Some(c) = &a.csv {
        outputs.push(c);
    }
    if ctx.prepare(&mut run, &inputs, &outputs)? {
        skipped(&run, &a.out);
        return Ok(());
    }
    let samples = read_samples(&a.samples)?;
    let responses: Vec<ResponseEntry> = read_in(&a.responses)?;
    let scorer = scorer(Some(&cfg), a.strict);
    let texts: BTreeMap<&str, &str> = responses
        .iter()
        .filter_map(|r| match r {
            ResponseEntry::Response(m) => Some((m.sample_id.as_str(), m.raw_text.as_str())),
            ResponseEntry::Error(_) => None,
        })
        .collect();
    let scored: Vec<Sample> = samples
        .into_iter()
        .filter(|s| s.conflict == ConflictType::Counterfactual && !s.is_negative() && texts.contains_key(s.id.as_str()))
        .collect();
    let flags: BTreeMap<String, bool> = scored
        .iter()
        .map(|s| (s.id.clone(), scorer.lexicon.detect(texts[s.id.as_str()])))
        .collect();
    let store = open_store(&cfg)?;
    let out = score_all(&backends, &store, &scored, mode);
    let report = analyze(&out.records, &flags, out.failures.len(), a.window);
    out_jsonl(&a.out, &out.records)?;
    let failures: Vec<Value> = out
        .failures
        .iter()
        .map(|(sample, error)| json!({"sample": sample, "error": error}))
        .collect();
    out_json(&report_path, &json!({"analysis": report, "failures": failures}))?;
    if let Some(c) = &a.csv {
        ensure_parent(c)?;
        write_atomic(c, curve_csv(&report.curve).as_bytes())
            .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", c.display())))?;
    }
    let counts = json!({
        "scored": report.scored,
        "unparsable": report.unparsable,
        "point_biserial": report.point_biserial,
    });
    emit(&run.finish(&outputs, counts)?);
    Ok(())
}

fn read_ratings(path: &Path) -> Result<Vec<ReviewRating>, CliError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    read_in(path)
}

fn quality_table_cmd(ctx: &Ctx, a: QualityTableArgs) -> Result<(), CliError> {
    let mut run = Run::new("quality-table");
    let mut inputs: Vec<&Path> = a.samples.iter().map(PathBuf::as_path).collect();
    inputs.push(&a.records);
    inputs.push(&a.ratings);
    if ctx.prepare(&mut run, &inputs, &[&a.out])? {
        skipped(&run, &a.out);
        return Ok(());
    }
    let samples = read_samples(&a.samples)?;
    let records: Vec<PerturbationRecord> = read_in(&a.records)?;
    let ratings = read_ratings(&a.ratings)?;
    let table = export_quality_table(&ratings, &samples, &records);
    out_json(&a.out, &table)?;
    emit(&run.finish(&[&a.out], json!({"rows": table.len(), "ratings": ratings.len()}))?);
    Ok(())
}

fn review_serve_cmd(ctx: &Ctx, a: ReviewServeArgs) -> Result<(), CliError> {
    let cfg = ctx.config()?;
    let samples = read_samples(&a.samples)?;
    let records: Vec<PerturbationRecord> = match &a.records {
        Some(p) => read_in(p)?,
        None => Vec::new(),
    };
    let ratings = read_ratings(&a.ratings)?;
    if let Some(d) = &a.static_dir {
        if !d.is_dir() {
            return Err(CliError::config(format!("static directory {} not found", d.display())));
        }
    }
    let store = open_store(&cfg)?;
    let state = crate::server::AppState::new(store, samples, records, ratings, a.ratings.clone())
        .map_err(|e| CliError::runtime(e.to_string()))?;
    let app = crate::server::router(state, a.static_dir.as_deref());
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::runtime(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.addr)
            .await
            .map_err(|e| CliError::config(format!("cannot bind {}: {e}", a.addr)))?;
        let local = listener.local_addr().map_err(|e| CliError::runtime(e.to_string()))?;
        println!("{}", json!({"listening": local.to_string()}));
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::runtime(e.to_string()))
    })
}

fn verify_cmd(a: VerifyArgs) -> Result<(), CliError> {
    let m: RunManifest = read_json(&a.run).map_err(|e| CliError::precondition(e.to_string()))?;
    let bad = verify(&m);
    if !bad.is_empty() {
        return Err(CliError::verify(format!("outputs changed: {}", bad.join(", "))));
    }
    println!("{}", json!({"run_id": m.run_id, "verified": m.outputs.len()}));
    Ok(())
}
