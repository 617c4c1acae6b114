use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use hardneg::context::{Decoding, StageContext, StageEndpoints};
use hardneg::corpus::{
    read_jsonl, read_pages, validate_counts, validate_manifest, write_jsonl, DatasetManifest, JsonlError, PageRecord,
    QueryKind, QueryRecord, Record, SourceCount, TripletRecord,
};
use hardneg::eval::{
    delta_report, parse_qrels, parse_scores, parse_trec_run, rerank, score_with_gateway, MissingPolicy, MissingScore,
};
use hardneg::forge::{
    attach_image_paths, build_dataset, example_counts, make_batches, Recipe, TrainingBatch, TrainingExample,
};
use hardneg::gateway::{Backend, Gateway, HttpBackend, MockScript, OfflineBackend, ScriptedMock};
use hardneg::generation::{parse_rephrase, rephrase_positions, rephrase_request, select_for_rephrasing};
use hardneg::pipeline::{
    plan_negative_stage, plan_positive_stage, run_negative_stage, run_positive_stage, NegativeMode, Plan,
};
use hardneg::prompts::PromptSet;
use hardneg::stats::StageStats;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::config::PipelineConfig;
use crate::{Cli, Command};

/// Exit status when a rerank evaluation regresses past the threshold.
const EXIT_REGRESSION: u8 = 3;

struct Runtime {
    gateway: Gateway,
    prompts: PromptSet,
    endpoints: StageEndpoints,
    decoding: Decoding,
    offline: Option<Arc<OfflineBackend>>,
}

impl Runtime {
    fn new(cli: &Cli, config: &PipelineConfig) -> Result<Self> {
        let mut offline = None;
        let placeholder = cli.dry_run || cli.mock_script.is_some();
        let backend: Arc<dyn Backend> = if cli.dry_run {
            let b = Arc::new(OfflineBackend::default());
            offline = Some(b.clone());
            b
        } else if let Some(path) = &cli.mock_script {
            let script = MockScript::load(path).with_context(|| format!("loading mock script {}", path.display()))?;
            Arc::new(ScriptedMock::new(script))
        } else {
            Arc::new(HttpBackend::new())
        };
        Ok(Self {
            gateway: Gateway::new(config.endpoint_configs(placeholder)?, backend)?,
            prompts: config.prompts()?,
            endpoints: config.stage_endpoints(),
            decoding: config.decoding.clone(),
            offline,
        })
    }

    fn ctx(&self) -> StageContext<'_> {
        StageContext {
            gateway: &self.gateway,
            prompts: &self.prompts,
            endpoints: &self.endpoints,
            decoding: &self.decoding,
        }
    }

    fn contacts(&self) -> usize {
        self.offline.as_ref().map_or(0, |o| o.contacts())
    }
}

fn emit(value: &Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("summary serializes"));
}

/// `dir/stem.suffix` next to `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

fn truncate<T>(mut items: Vec<T>, limit: Option<usize>) -> Vec<T> {
    if let Some(n) = limit {
        items.truncate(n);
    }
    items
}

fn plan_summary(command: &str, plan: &Plan, contacts: usize) -> Value {
    let mut samples = BTreeMap::new();
    for r in &plan.requests {
        samples.entry(r.request_tag.clone()).or_insert_with(|| r.prompt.clone());
    }
    json!({
        "command": command,
        "dry_run": true,
        "requests": plan.requests.len(),
        "requests_by_tag": plan.counts_by_tag(),
        "estimated_verification_calls": plan.estimated_verification_calls,
        "skipped": plan.skipped,
        "sample_prompts": samples,
        "gateway_contacts": contacts,
    })
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.dataset.seed = seed;
        config.generation.seed = seed;
    }
    match &cli.command {
        Command::GenPositives { corpus, out } => gen_positives(&cli, &config, corpus, out),
        Command::GenNegatives {
            corpus,
            positives,
            mode,
            out,
            name,
        } => gen_negatives(&cli, &config, corpus, positives, *mode, out, name.as_deref()),
        Command::Rephrase {
            positives,
            out,
            fraction,
        } => rephrase(&cli, &config, positives, out, *fraction),
        Command::BuildDataset {
            recipe,
            out_dir,
            corpus,
            batches,
        } => build(&cli, &config, recipe, out_dir.as_deref(), corpus.as_deref(), *batches),
        Command::ExportBatches {
            dataset,
            out,
            batch_groups,
        } => export_batches(&config, dataset, out, *batch_groups),
        Command::RerankEval {
            run,
            qrels,
            scores,
            corpus,
            queries,
            out_dir,
        } => rerank_eval(
            &cli,
            &config,
            EvalInputs {
                run,
                qrels,
                scores: scores.as_deref(),
                corpus: corpus.as_deref(),
                queries: queries.as_deref(),
                out_dir: out_dir.as_deref(),
            },
        ),
        Command::Validate {
            pages,
            queries,
            triplets,
            examples,
            batches,
            manifest,
        } => validate(ValidateInputs {
            pages: pages.as_deref(),
            queries: queries.as_deref(),
            triplets: triplets.as_deref(),
            examples: examples.as_deref(),
            batches: batches.as_deref(),
            manifest: manifest.as_deref(),
        }),
    }
}

fn gen_positives(cli: &Cli, config: &PipelineConfig, corpus: &Path, out: &Path) -> Result<ExitCode> {
    let pages = truncate(read_pages(corpus)?, cli.limit);
    let rt = Runtime::new(cli, config)?;
    if cli.dry_run {
        let plan = plan_positive_stage(&rt.ctx(), &pages, &config.generation)?;
        emit(&plan_summary("gen-positives", &plan, rt.contacts()));
        return Ok(ExitCode::SUCCESS);
    }
    let mut stats = StageStats::new();
    let stage = run_positive_stage(
        &rt.ctx(),
        &pages,
        &config.generation,
        config.stage_options(),
        &mut stats,
    )?;
    ensure_parent(out)?;
    let candidates_path = sibling(out, "candidates.jsonl");
    let verdicts_path = sibling(out, "verdicts.jsonl");
    write_jsonl(&stage.positives, out)?;
    write_jsonl(&stage.candidates, &candidates_path)?;
    write_jsonl(&stage.verdicts, &verdicts_path)?;
    emit(&json!({
        "command": "gen-positives",
        "pages": pages.len(),
        "candidates": stage.candidates.len(),
        "kept_positives": stage.positives.len(),
        "skipped": stage.skipped,
        "stats": stats,
        "outputs": {"positives": out, "candidates": candidates_path, "verdicts": verdicts_path},
    }));
    Ok(ExitCode::SUCCESS)
}

fn gen_negatives(
    cli: &Cli,
    config: &PipelineConfig,
    corpus: &Path,
    positives_path: &Path,
    mode: NegativeMode,
    out: &Path,
    name: Option<&str>,
) -> Result<ExitCode> {
    let pages = read_pages(corpus)?;
    let positives: Vec<QueryRecord> = truncate(read_jsonl(positives_path)?, cli.limit);
    let rt = Runtime::new(cli, config)?;
    if cli.dry_run {
        let plan = plan_negative_stage(&rt.ctx(), &positives, mode, &config.generation)?;
        emit(&plan_summary("gen-negatives", &plan, rt.contacts()));
        return Ok(ExitCode::SUCCESS);
    }
    let mut stats = StageStats::new();
    let stage = run_negative_stage(
        &rt.ctx(),
        &pages,
        &positives,
        mode,
        &config.generation,
        config.stage_options(),
        &mut stats,
    )?;
    ensure_parent(out)?;
    let name = name.unwrap_or(match mode {
        NegativeMode::Generic => "HNQue",
        NegativeMode::Finance => "Fin-HNQue",
    });
    let manifest = DatasetManifest::from_sources(
        name,
        vec![SourceCount {
            name: name.to_string(),
            positives: stage.triplets.len() as u64,
        }],
        0.0,
        config.dataset.seed,
    );
    let negatives_path = sibling(out, "negatives.jsonl");
    let verdicts_path = sibling(out, "verdicts.jsonl");
    let manifest_path = sibling(out, "manifest.json");
    write_jsonl(&stage.triplets, out)?;
    write_jsonl(&stage.negatives, &negatives_path)?;
    write_jsonl(&stage.verdicts, &verdicts_path)?;
    manifest.write(&manifest_path)?;
    emit(&json!({
        "command": "gen-negatives",
        "mode": mode,
        "positives": positives.len(),
        "triplets": stage.triplets.len(),
        "excluded": stage.excluded,
        "stats": stats,
        "outputs": {
            "triplets": out,
            "negatives": negatives_path,
            "verdicts": verdicts_path,
            "manifest": manifest_path,
        },
    }));
    Ok(ExitCode::SUCCESS)
}

fn rephrase(
    cli: &Cli,
    config: &PipelineConfig,
    positives_path: &Path,
    out: &Path,
    fraction: Option<f64>,
) -> Result<ExitCode> {
    let positives: Vec<QueryRecord> = truncate(read_jsonl(positives_path)?, cli.limit);
    let fraction = fraction.unwrap_or(config.dataset.rephrase_fraction);
    if !(0.0..=1.0).contains(&fraction) {
        bail!("fraction must be in [0, 1]");
    }
    let selected = select_for_rephrasing(&positives, fraction, config.dataset.seed);
    let rt = Runtime::new(cli, config)?;
    let requests = selected
        .iter()
        .map(|q| rephrase_request(&rt.ctx(), q))
        .collect::<Result<Vec<_>, _>>()?;
    if cli.dry_run {
        let plan = Plan {
            requests: requests
                .iter()
                .map(hardneg::pipeline::PlannedRequest::from_request)
                .collect(),
            ..Default::default()
        };
        emit(&plan_summary("rephrase", &plan, rt.contacts()));
        return Ok(ExitCode::SUCCESS);
    }
    let mut stats = StageStats::new();
    let records: Vec<QueryRecord> = selected
        .iter()
        .zip(rt.gateway.complete_many(&requests))
        .map(|(q, result)| parse_rephrase(q, result, &mut stats))
        .collect();
    ensure_parent(out)?;
    write_jsonl(&records, out)?;
    let rephrased = records
        .iter()
        .filter(|q| q.kind == QueryKind::RephrasedPositive)
        .count();
    emit(&json!({
        "command": "rephrase",
        "positives": positives.len(),
        "selected": selected.len(),
        "rephrased": rephrased,
        "fraction": fraction,
        "stats": stats,
        "outputs": {"rephrased": out},
    }));
    Ok(ExitCode::SUCCESS)
}

fn build(
    cli: &Cli,
    config: &PipelineConfig,
    recipe_path: &Path,
    out_dir: Option<&Path>,
    corpus: Option<&Path>,
    batches: bool,
) -> Result<ExitCode> {
    let text = fs::read_to_string(recipe_path).with_context(|| format!("reading {}", recipe_path.display()))?;
    let mut recipe: Recipe = toml::from_str(&text).with_context(|| format!("parsing {}", recipe_path.display()))?;
    let base = recipe_path.parent().unwrap_or(Path::new("."));
    let fraction = recipe.rephrase_fraction.unwrap_or(config.dataset.rephrase_fraction);
    let rephrasing = fraction > 0.0 && recipe.sources.iter().any(|s| s.rephrase);
    let seed = config.dataset.seed;
    let mut stats = StageStats::new();
    if cli.dry_run {
        recipe.rephrase_fraction = Some(0.0);
        let built = build_dataset(&recipe, base, None, 0.0, seed, &mut stats)?;
        let planned: usize = recipe
            .sources
            .iter()
            .filter(|s| s.rephrase && rephrasing)
            .map(|s| rephrase_positions(s.positives as usize, fraction, seed).len())
            .sum();
        emit(&json!({
            "command": "build-dataset",
            "dry_run": true,
            "manifest": built.manifest,
            "planned_rephrase_requests": planned,
            "gateway_contacts": 0,
        }));
        return Ok(ExitCode::SUCCESS);
    }
    let rt = if rephrasing {
        Some(Runtime::new(cli, config)?)
    } else {
        None
    };
    let ctx = rt.as_ref().map(Runtime::ctx);
    let mut built = build_dataset(
        &recipe,
        base,
        ctx.as_ref(),
        config.dataset.rephrase_fraction,
        seed,
        &mut stats,
    )?;
    if let Some(corpus) = corpus {
        let images: HashMap<String, PathBuf> = read_pages(corpus)?
            .into_iter()
            .map(|p| (p.page_id, p.image_path))
            .collect();
        attach_image_paths(&mut built.examples, &images);
    }
    let report = validate_counts(&built.manifest, example_counts(&built.examples));
    if !report.is_consistent() {
        bail!("manifest does not match the emitted examples: {:?}", report.mismatches);
    }
    let out_dir = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| config.dataset.output_dir.clone());
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let dataset_path = out_dir.join("dataset.jsonl");
    let manifest_path = out_dir.join("manifest.json");
    write_jsonl(&built.examples, &dataset_path)?;
    built.manifest.write(&manifest_path)?;
    let mut outputs = json!({"dataset": dataset_path, "manifest": manifest_path});
    if !built.rephrased.is_empty() {
        let path = out_dir.join("rephrased.jsonl");
        write_jsonl(&built.rephrased, &path)?;
        outputs["rephrased"] = json!(path);
    }
    let mut batch_summary = Value::Null;
    if batches || config.dataset.export_batches {
        let plan = make_batches(&built.examples, config.dataset.batch_groups, seed)?;
        let path = out_dir.join("batches.jsonl");
        write_jsonl(&plan.batches, &path)?;
        outputs["batches"] = json!(path);
        batch_summary = json!({"batches": plan.batches.len(), "dropped_groups": plan.dropped_groups});
    }
    let rephrased = built
        .rephrased
        .iter()
        .filter(|q| q.kind == QueryKind::RephrasedPositive)
        .count();
    emit(&json!({
        "command": "build-dataset",
        "manifest": built.manifest,
        "rephrase_attempts": built.rephrased.len(),
        "rephrased_positives": rephrased,
        "batches": batch_summary,
        "stats": stats,
        "outputs": outputs,
    }));
    Ok(ExitCode::SUCCESS)
}

fn export_batches(
    config: &PipelineConfig,
    dataset: &Path,
    out: &Path,
    batch_groups: Option<usize>,
) -> Result<ExitCode> {
    let examples: Vec<TrainingExample> = read_jsonl(dataset)?;
    let plan = make_batches(
        &examples,
        batch_groups.unwrap_or(config.dataset.batch_groups),
        config.dataset.seed,
    )?;
    ensure_parent(out)?;
    write_jsonl(&plan.batches, out)?;
    emit(&json!({
        "command": "export-batches",
        "examples": examples.len(),
        "batches": plan.batches.len(),
        "dropped_groups": plan.dropped_groups,
        "outputs": {"batches": out},
    }));
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Deserialize)]
struct QueryText {
    query_id: String,
    text: String,
}

struct EvalInputs<'a> {
    run: &'a Path,
    qrels: &'a Path,
    scores: Option<&'a Path>,
    corpus: Option<&'a Path>,
    queries: Option<&'a Path>,
    out_dir: Option<&'a Path>,
}

fn read_query_texts(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let q: QueryText = serde_json::from_str(line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        out.insert(q.query_id, q.text);
    }
    Ok(out)
}

fn rerank_eval(cli: &Cli, config: &PipelineConfig, inputs: EvalInputs<'_>) -> Result<ExitCode> {
    let run = parse_trec_run(inputs.run)?;
    let qrels = parse_qrels(inputs.qrels)?;
    let k = config.eval.k_rerank;
    let mut gateway_missing: Vec<MissingScore> = Vec::new();
    let mut hard_decisions = 0;
    let mut from_gateway = false;
    let scores = match inputs.scores {
        Some(path) => parse_scores(path)?,
        None => {
            let (Some(corpus), Some(queries)) = (inputs.corpus, inputs.queries) else {
                bail!("rerank-eval needs --scores, or --corpus and --queries to score with the rerank endpoint");
            };
            let pages: HashMap<String, PageRecord> = read_pages(corpus)?
                .into_iter()
                .map(|p| (p.page_id.clone(), p))
                .collect();
            let texts = read_query_texts(queries)?;
            let rt = Runtime::new(cli, config)?;
            if cli.dry_run {
                let pairs: usize = run.iter().map(|(_, l)| l.len().min(k)).sum();
                emit(&json!({
                    "command": "rerank-eval",
                    "dry_run": true,
                    "queries": run.len(),
                    "planned_rerank_requests": pairs,
                    "gateway_contacts": rt.contacts(),
                }));
                return Ok(ExitCode::SUCCESS);
            }
            let scored = score_with_gateway(&rt.ctx(), &run, &texts, &pages, k)?;
            gateway_missing = scored.missing;
            hard_decisions = scored.hard_decisions;
            from_gateway = true;
            scored.table
        }
    };
    let reranked = rerank(&run, &scores, k, MissingPolicy::Demote)?;
    if !reranked.missing.is_empty() {
        let listed: Vec<String> = reranked.missing.iter().map(|(q, p)| format!("({q}, {p})")).collect();
        if !cli.allow_missing {
            for m in &gateway_missing {
                eprintln!("no score for ({}, {}): {}", m.query_id, m.page_id, m.reason);
            }
            bail!("{} top-{k} pairs have no score: {}", listed.len(), listed.join(", "));
        }
        tracing::warn!(missing = listed.len(), "unscored candidates placed after scored ones");
    }
    let report = delta_report(&run, &reranked.run, &qrels, &config.eval.metrics)?;
    let regressions: Vec<String> = report
        .regressions(config.eval.regression_threshold)
        .iter()
        .map(|r| r.metric.to_string())
        .collect();
    eprint!("{}", report.to_text());
    let missing: Vec<Value> = reranked
        .missing
        .iter()
        .map(|(q, p)| json!({"query_id": q, "page_id": p}))
        .collect();
    let mut summary = json!({
        "command": "rerank-eval",
        "k_rerank": k,
        "report": report,
        "missing": missing,
        "hard_decision_pairs": hard_decisions,
        "regressions": regressions,
    });
    if let Some(dir) = inputs.out_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join("report.txt"), report.to_text())?;
        fs::write(dir.join("report.json"), report.to_json())?;
        reranked.run.write_trec(&dir.join("reranked.trec"))?;
        if from_gateway {
            fs::write(dir.join("scores.txt"), scores.to_text())?;
        }
        summary["outputs"] = json!({"dir": dir});
    }
    emit(&summary);
    if regressions.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        tracing::error!(
            ?regressions,
            threshold = config.eval.regression_threshold,
            "metrics regressed"
        );
        Ok(ExitCode::from(EXIT_REGRESSION))
    }
}

struct ValidateInputs<'a> {
    pages: Option<&'a Path>,
    queries: Option<&'a Path>,
    triplets: Option<&'a Path>,
    examples: Option<&'a Path>,
    batches: Option<&'a Path>,
    manifest: Option<&'a Path>,
}

fn check<T: Record + for<'de> Deserialize<'de>>(
    path: Option<&Path>,
    kind: &str,
    files: &mut Vec<Value>,
) -> Option<Vec<T>> {
    let path = path?;
    let result: Result<Vec<T>, JsonlError> = read_jsonl(path);
    let (entry, records) = match result {
        Ok(records) => (
            json!({"kind": kind, "path": path, "ok": true, "records": records.len()}),
            Some(records),
        ),
        Err(e) => (
            json!({"kind": kind, "path": path, "ok": false, "error": e.to_string()}),
            None,
        ),
    };
    files.push(entry);
    records
}

fn validate(inputs: ValidateInputs<'_>) -> Result<ExitCode> {
    let mut files = Vec::new();
    check::<PageRecord>(inputs.pages, "pages", &mut files);
    check::<QueryRecord>(inputs.queries, "queries", &mut files);
    let triplets = check::<TripletRecord>(inputs.triplets, "triplets", &mut files);
    let examples = check::<TrainingExample>(inputs.examples, "examples", &mut files);
    check::<TrainingBatch>(inputs.batches, "batches", &mut files);
    if files.is_empty() && inputs.manifest.is_none() {
        bail!("nothing to validate; pass at least one of --pages, --queries, --triplets, --examples, --batches, --manifest");
    }
    if let Some(path) = inputs.manifest {
        let entry = match DatasetManifest::read(path) {
            Err(e) => json!({"kind": "manifest", "path": path, "ok": false, "error": e.to_string()}),
            Ok(manifest) => {
                let report = match (&triplets, &examples) {
                    (Some(t), _) => Some(validate_manifest(&manifest, t)),
                    (None, Some(e)) => Some(validate_counts(&manifest, example_counts(e))),
                    (None, None) => None,
                };
                match report {
                    Some(r) => {
                        json!({"kind": "manifest", "path": path, "ok": r.is_consistent(), "mismatches": r.mismatches})
                    }
                    None => {
                        json!({"kind": "manifest", "path": path, "ok": true, "note": "no records given to compare against"})
                    }
                }
            }
        };
        files.push(entry);
    }
    let ok = files.iter().all(|f| f["ok"] == json!(true));
    emit(&json!({"command": "validate", "ok": ok, "files": files}));
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
