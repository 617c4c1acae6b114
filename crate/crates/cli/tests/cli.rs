use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hardneg::corpus::{
    write_jsonl, DatasetManifest, Polarity, PromptVariant, QueryKind, QueryRecord, TripletRecord, Verification,
};
use hardneg::gateway::{MockResponse, MockRule, MockScript, MATCH_ANY};
use hardneg::synthetic::{demo_has_no_positive, demo_is_restrictive, demo_script, write_corpus};
use serde_json::Value;

fn hardneg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hardneg"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(output: &Output) -> Value {
    assert!(
        output.status.success(),
        "exit {:?}\nstderr:\n{}",
        output.status.code(),
        String::from_utf8_lossy(&output.stderr)
    );
    serde_json::from_slice(&output.stdout).expect("stdout is JSON")
}

fn write_script(dir: &Path, script: &MockScript) -> PathBuf {
    let path = dir.join("script.json");
    fs::write(&path, serde_json::to_string_pretty(script).unwrap()).unwrap();
    path
}

fn lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn permissive(verify_b: &str) -> MockScript {
    let text = |s: &str| vec![MockResponse::text(s)];
    MockScript {
        rules: vec![
            MockRule::repeat("positive_gen", MATCH_ANY, text("1. What was the net revenue in 2022?")),
            MockRule::repeat("verify_A", MATCH_ANY, text("Yes")),
            MockRule::repeat("verify_B", MATCH_ANY, text(verify_b)),
        ],
        default: None,
    }
}

#[test]
fn gen_positives_keeps_all_with_permissive_mock() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), "synthetic", "p", 10).unwrap();
    write_script(dir.path(), &permissive("Yes"));
    let summary = ok(&hardneg(
        dir.path(),
        &[
            "gen-positives",
            "--corpus",
            "pages.jsonl",
            "--out",
            "positives.jsonl",
            "--mock-script",
            "script.json",
        ],
    ));
    assert_eq!(summary["kept_positives"], 10);
    assert_eq!(lines(&dir.path().join("positives.jsonl")), 10);
    assert_eq!(lines(&dir.path().join("positives.verdicts.jsonl")), 20);
}

#[test]
fn gen_positives_rejected_by_variant_b() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), "synthetic", "p", 10).unwrap();
    write_script(dir.path(), &permissive("No"));
    let summary = ok(&hardneg(
        dir.path(),
        &[
            "gen-positives",
            "--corpus",
            "pages.jsonl",
            "--out",
            "positives.jsonl",
            "--mock-script",
            "script.json",
        ],
    ));
    assert_eq!(summary["kept_positives"], 0);
    assert_eq!(summary["stats"]["verify.positive_rejected"], 10, "{summary}");
    assert_eq!(summary["skipped"].as_array().unwrap().len(), 10);
}

#[test]
fn gen_positives_skips_missing_image() {
    let dir = tempfile::tempdir().unwrap();
    let mut pages = write_corpus(dir.path(), "synthetic", "p", 4).unwrap();
    pages[2].image_path = dir.path().join("missing.png");
    write_jsonl(&pages, &dir.path().join("pages.jsonl")).unwrap();
    write_script(dir.path(), &permissive("Yes"));
    let summary = ok(&hardneg(
        dir.path(),
        &[
            "gen-positives",
            "--corpus",
            "pages.jsonl",
            "--out",
            "positives.jsonl",
            "--mock-script",
            "script.json",
        ],
    ));
    assert_eq!(summary["kept_positives"], 3);
    assert_eq!(summary["stats"]["positive.pages_skipped_image"], 1);
    assert_eq!(summary["skipped"][0]["id"], "p002");
}

fn kept_positive(page_id: &str, text: &str) -> QueryRecord {
    let mut q = QueryRecord::new(
        format!("{page_id}/pos/0"),
        page_id,
        text,
        Polarity::Positive,
        QueryKind::GeneratedPositive,
    );
    q.set_verdict(PromptVariant::A, true);
    q.set_verdict(PromptVariant::B, true);
    q.verification = Verification::Kept;
    q
}

#[test]
fn gen_negatives_modes_and_exclusions() {
    let dir = tempfile::tempdir().unwrap();
    let pages = write_corpus(dir.path(), "synthetic", "p", 12).unwrap();
    let ids: Vec<String> = pages.iter().map(|p| p.page_id.clone()).collect();
    write_script(dir.path(), &demo_script(&ids));
    let run = |args: &[&str]| {
        ok(&hardneg(
            dir.path(),
            &[args, &["--mock-script", "script.json"]].concat(),
        ))
    };
    run(&["gen-positives", "--corpus", "pages.jsonl", "--out", "pos.jsonl"]);

    let generic = run(&[
        "gen-negatives",
        "--corpus",
        "pages.jsonl",
        "--positives",
        "pos.jsonl",
        "--mode",
        "generic",
        "--out",
        "generic.jsonl",
    ]);
    let with_positive: Vec<usize> = (0..12).filter(|i| !demo_has_no_positive(*i)).collect();
    let restrictive = with_positive.iter().filter(|i| demo_is_restrictive(**i)).count();
    assert_eq!(generic["triplets"], (with_positive.len() - restrictive) as u64);
    assert_eq!(generic["excluded"].as_array().unwrap().len(), restrictive);
    assert!(generic["excluded"][0]["reason"].as_str().unwrap().contains("only 2"));

    let finance = run(&[
        "gen-negatives",
        "--corpus",
        "pages.jsonl",
        "--positives",
        "pos.jsonl",
        "--mode",
        "finance",
        "--out",
        "fin.jsonl",
    ]);
    assert_eq!(finance["triplets"], with_positive.len() as u64);
    let triplets: Vec<TripletRecord> = hardneg::corpus::read_jsonl(&dir.path().join("fin.jsonl")).unwrap();
    assert!(triplets.iter().flat_map(|t| &t.negatives).all(|n| n.property.is_some()));
    let manifest = DatasetManifest::read(&dir.path().join("fin.manifest.json")).unwrap();
    assert_eq!(
        (manifest.name.as_str(), manifest.total_positives),
        ("Fin-HNQue", triplets.len() as u64)
    );

    let valid = ok(&hardneg(
        dir.path(),
        &["validate", "--triplets", "fin.jsonl", "--manifest", "fin.manifest.json"],
    ));
    assert_eq!(valid["ok"], true);
}

#[test]
fn pipeline_is_replayable() {
    let outputs = || {
        let dir = tempfile::tempdir().unwrap();
        let pages = write_corpus(dir.path(), "synthetic", "p", 8).unwrap();
        let ids: Vec<String> = pages.iter().map(|p| p.page_id.clone()).collect();
        write_script(dir.path(), &demo_script(&ids));
        let run = |args: &[&str]| {
            ok(&hardneg(
                dir.path(),
                &[args, &["--mock-script", "script.json", "--seed", "11"]].concat(),
            ))
        };
        run(&["gen-positives", "--corpus", "pages.jsonl", "--out", "pos.jsonl"]);
        run(&[
            "gen-negatives",
            "--corpus",
            "pages.jsonl",
            "--positives",
            "pos.jsonl",
            "--mode",
            "generic",
            "--out",
            "t.jsonl",
        ]);
        [
            "pos.jsonl",
            "pos.verdicts.jsonl",
            "t.jsonl",
            "t.manifest.json",
            "t.verdicts.jsonl",
        ]
        .map(|f| fs::read(dir.path().join(f)).unwrap())
    };
    assert_eq!(outputs(), outputs());
}

#[test]
fn dry_run_contacts_nothing_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), "synthetic", "p", 5).unwrap();
    let summary = ok(&hardneg(
        dir.path(),
        &[
            "gen-positives",
            "--corpus",
            "pages.jsonl",
            "--out",
            "pos.jsonl",
            "--dry-run",
        ],
    ));
    assert_eq!(summary["dry_run"], true);
    assert_eq!(summary["gateway_contacts"], 0);
    assert_eq!(summary["requests_by_tag"]["positive_gen"], 5);
    assert_eq!(summary["estimated_verification_calls"], 100);
    assert!(summary["sample_prompts"]["positive_gen"]
        .as_str()
        .unwrap()
        .contains("10"));
    assert!(!dir.path().join("pos.jsonl").exists());

    let positives: Vec<QueryRecord> = (0..3)
        .map(|i| kept_positive(&format!("p{i:03}"), "What was revenue in 2022?"))
        .collect();
    write_jsonl(&positives, &dir.path().join("pos.jsonl")).unwrap();
    let summary = ok(&hardneg(
        dir.path(),
        &[
            "gen-negatives",
            "--corpus",
            "pages.jsonl",
            "--positives",
            "pos.jsonl",
            "--mode",
            "finance",
            "--out",
            "t.jsonl",
            "--dry-run",
        ],
    ));
    assert_eq!(summary["requests_by_tag"]["negative_gen_finance"], 18);
    assert_eq!(summary["gateway_contacts"], 0);
    assert!(!dir.path().join("t.jsonl").exists());
}

#[test]
fn rephrase_half_of_two_hundred() {
    let dir = tempfile::tempdir().unwrap();
    let positives: Vec<QueryRecord> = (0..200)
        .map(|i| kept_positive(&format!("p{i:03}"), &format!("What was the revenue of unit {i}?")))
        .collect();
    write_jsonl(&positives, &dir.path().join("pos.jsonl")).unwrap();
    let script = MockScript {
        rules: vec![MockRule::repeat(
            "rephrase",
            MATCH_ANY,
            vec![MockResponse::text("How much did the unit earn?")],
        )],
        default: None,
    };
    write_script(dir.path(), &script);
    let summary = ok(&hardneg(
        dir.path(),
        &[
            "rephrase",
            "--positives",
            "pos.jsonl",
            "--out",
            "reph.jsonl",
            "--fraction",
            "0.5",
            "--mock-script",
            "script.json",
        ],
    ));
    assert_eq!(summary["selected"], 100);
    assert_eq!(summary["rephrased"], 100);
    let records: Vec<QueryRecord> = hardneg::corpus::read_jsonl(&dir.path().join("reph.jsonl")).unwrap();
    assert!(records
        .iter()
        .all(|q| q.kind == QueryKind::RephrasedPositive && q.parent_query_id.is_some()));
}

fn synthetic_triplets(n: usize, prefix: &str) -> Vec<TripletRecord> {
    (0..n)
        .map(|i| {
            let page = format!("{prefix}{i:05}");
            let positive = kept_positive(&page, &format!("What was the revenue of {page} in 2022?"));
            let negatives = (0..3)
                .map(|j| {
                    let mut q = QueryRecord::new(
                        format!("{}/neg/{j}", positive.query_id),
                        &page,
                        format!("What was the revenue of {page} in {}?", 2010 + j),
                        Polarity::Negative,
                        QueryKind::GenericNegative,
                    );
                    q.parent_query_id = Some(positive.query_id.clone());
                    q.set_verdict(PromptVariant::A, false);
                    q.set_verdict(PromptVariant::B, false);
                    q.verification = Verification::Kept;
                    q
                })
                .collect();
            TripletRecord {
                page_id: page,
                positive,
                negatives,
            }
        })
        .collect()
}

#[test]
fn build_dataset_fin_full_scale() {
    let dir = tempfile::tempdir().unwrap();
    write_jsonl(&synthetic_triplets(20_000, "fin"), &dir.path().join("fin.jsonl")).unwrap();
    fs::write(
        dir.path().join("recipe.toml"),
        "name = \"Fin-HNQue\"\n\n[[sources]]\nname = \"Fin-HNQue\"\nformat = \"triplets\"\npath = \"fin.jsonl\"\npositives = 20000\n",
    )
    .unwrap();
    let build = |out: &str| {
        ok(&hardneg(
            dir.path(),
            &[
                "build-dataset",
                "--recipe",
                "recipe.toml",
                "--out-dir",
                out,
                "--seed",
                "5",
            ],
        ))
    };
    let summary = build("a");
    assert_eq!(summary["manifest"]["total_positives"], 20_000);
    assert_eq!(summary["manifest"]["total_examples"], 80_000);
    assert_eq!(lines(&dir.path().join("a/dataset.jsonl")), 80_000);
    build("b");
    assert_eq!(
        fs::read(dir.path().join("a/manifest.json")).unwrap(),
        fs::read(dir.path().join("b/manifest.json")).unwrap()
    );
    let valid = ok(&hardneg(
        dir.path(),
        &[
            "validate",
            "--examples",
            "a/dataset.jsonl",
            "--manifest",
            "a/manifest.json",
        ],
    ));
    assert_eq!(valid["ok"], true);
}

#[test]
fn build_dataset_rephrases_and_batches() {
    let dir = tempfile::tempdir().unwrap();
    write_jsonl(&synthetic_triplets(200, "q"), &dir.path().join("que.jsonl")).unwrap();
    fs::write(
        dir.path().join("recipe.toml"),
        "name = \"Reph\"\nrephrase_fraction = 0.5\n\n[[sources]]\nname = \"Reph-HNQue\"\nformat = \"triplets\"\npath = \"que.jsonl\"\npositives = 200\nrephrase = true\n",
    )
    .unwrap();
    let script = MockScript {
        rules: vec![MockRule::repeat(
            "rephrase",
            MATCH_ANY,
            vec![MockResponse::text("How much did it earn that year?")],
        )],
        default: None,
    };
    write_script(dir.path(), &script);
    let summary = ok(&hardneg(
        dir.path(),
        &[
            "build-dataset",
            "--recipe",
            "recipe.toml",
            "--out-dir",
            "out",
            "--batches",
            "--mock-script",
            "script.json",
        ],
    ));
    assert_eq!(summary["rephrased_positives"], 100);
    assert_eq!(summary["manifest"]["rephrase_fraction"], 0.5);
    assert_eq!(summary["batches"]["batches"], 25);
    assert_eq!(lines(&dir.path().join("out/rephrased.jsonl")), 100);

    let export = ok(&hardneg(
        dir.path(),
        &[
            "export-batches",
            "--dataset",
            "out/dataset.jsonl",
            "--out",
            "b.jsonl",
            "--batch-groups",
            "16",
        ],
    ));
    assert_eq!(export["batches"], 12);
    assert_eq!(export["dropped_groups"], 8);
    let valid = ok(&hardneg(dir.path(), &["validate", "--batches", "b.jsonl"]));
    assert_eq!(valid["ok"], true);
}

#[test]
fn build_dataset_insufficient_source_fails() {
    let dir = tempfile::tempdir().unwrap();
    write_jsonl(&synthetic_triplets(5, "q"), &dir.path().join("que.jsonl")).unwrap();
    fs::write(
        dir.path().join("recipe.toml"),
        "name = \"x\"\n\n[[sources]]\nname = \"Col-HNQue\"\nformat = \"triplets\"\npath = \"que.jsonl\"\npositives = 6\n",
    )
    .unwrap();
    let out = hardneg(
        dir.path(),
        &["build-dataset", "--recipe", "recipe.toml", "--out-dir", "out"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Col-HNQue"));
}

fn eval_args<'a>(scores: &'a str, extra: &[&'a str]) -> Vec<String> {
    let mut args: Vec<String> = vec![
        "rerank-eval".into(),
        "--run".into(),
        fixture("eval/run.trec").display().to_string(),
        "--qrels".into(),
        fixture("eval/qrels.trec").display().to_string(),
        "--scores".into(),
        scores.into(),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    args
}

fn run_eval(dir: &Path, args: &[String]) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    hardneg(dir, &refs)
}

#[test]
fn rerank_eval_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.toml"), "[eval]\nregression_threshold = 0.05\n").unwrap();
    let scores = fixture("eval/scores.txt").display().to_string();
    let out = run_eval(
        dir.path(),
        &eval_args(&scores, &["--out-dir", "report", "--config", "cfg.toml"]),
    );
    let summary = ok(&out);
    assert_eq!(
        fs::read_to_string(dir.path().join("report/report.txt")).unwrap(),
        fs::read_to_string(fixture("eval/report.txt")).unwrap()
    );
    let golden: Value = serde_json::from_str(&fs::read_to_string(fixture("eval/report.json")).unwrap()).unwrap();
    let got = &summary["report"];
    assert_eq!(got["queries"], golden["queries"]);
    for (g, r) in golden["rows"]
        .as_array()
        .unwrap()
        .iter()
        .zip(got["rows"].as_array().unwrap())
    {
        assert_eq!(g["metric"], r["metric"]);
        for field in ["baseline", "reranked", "delta"] {
            let (a, b) = (g[field].as_f64().unwrap(), r[field].as_f64().unwrap());
            assert!((a - b).abs() < 1e-12, "{} {field}: {a} vs {b}", g["metric"]);
        }
    }

    let strict = run_eval(dir.path(), &eval_args(&scores, &[]));
    assert_eq!(strict.status.code(), Some(3), "recall@5 regresses in the fixture");
}

#[test]
fn rerank_eval_identity_and_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let run = fs::read_to_string(fixture("eval/run.trec")).unwrap();
    let qrels = fs::read_to_string(fixture("eval/qrels.trec")).unwrap();
    let relevant: std::collections::BTreeSet<(String, String)> = qrels
        .lines()
        .map(|l| l.split_whitespace().collect::<Vec<_>>())
        .filter(|f| f[3] == "1")
        .map(|f| (f[0].to_string(), f[2].to_string()))
        .collect();
    let mut identity = String::new();
    let mut oracle = String::new();
    for line in run.lines() {
        let f: Vec<&str> = line.split_whitespace().collect();
        identity.push_str(&format!("{} {} {}\n", f[0], f[2], f[4]));
        let rel = relevant.contains(&(f[0].to_string(), f[2].to_string()));
        oracle.push_str(&format!("{} {} {}\n", f[0], f[2], if rel { 1 } else { 0 }));
    }
    fs::write(dir.path().join("identity.txt"), identity).unwrap();
    fs::write(dir.path().join("oracle.txt"), oracle).unwrap();

    let summary = ok(&run_eval(dir.path(), &eval_args("identity.txt", &[])));
    for row in summary["report"]["rows"].as_array().unwrap() {
        assert_eq!(row["delta"], 0.0);
    }
    let summary = ok(&run_eval(dir.path(), &eval_args("oracle.txt", &[])));
    let ndcg5 = &summary["report"]["rows"][0];
    assert_eq!(ndcg5["metric"], "ndcg@5");
    assert!(ndcg5["reranked"].as_f64().unwrap() >= ndcg5["baseline"].as_f64().unwrap());
}

#[test]
fn rerank_eval_missing_scores() {
    let dir = tempfile::tempdir().unwrap();
    let partial: String = fs::read_to_string(fixture("eval/scores.txt"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(dir.path().join("partial.txt"), partial).unwrap();
    let out = run_eval(dir.path(), &eval_args("partial.txt", &[]));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("have no score"));
    let out = run_eval(
        dir.path(),
        &eval_args("partial.txt", &["--allow-missing", "--config", "cfg.toml"]),
    );
    assert_eq!(out.status.code(), Some(1), "missing config file is an error");
    fs::write(dir.path().join("cfg.toml"), "[eval]\nregression_threshold = 1.0\n").unwrap();
    let summary = ok(&run_eval(
        dir.path(),
        &eval_args("partial.txt", &["--allow-missing", "--config", "cfg.toml"]),
    ));
    assert_eq!(summary["missing"].as_array().unwrap().len(), 1);
}

#[test]
fn validate_reports_bad_records() {
    let dir = tempfile::tempdir().unwrap();
    let mut triplets = synthetic_triplets(2, "p");
    let json: Vec<String> = triplets.iter().map(|t| serde_json::to_string(t).unwrap()).collect();
    fs::write(dir.path().join("good.jsonl"), json.join("\n")).unwrap();
    triplets[1].negatives.pop();
    let json: Vec<String> = triplets.iter().map(|t| serde_json::to_string(t).unwrap()).collect();
    fs::write(dir.path().join("bad.jsonl"), json.join("\n")).unwrap();

    let good = ok(&hardneg(dir.path(), &["validate", "--triplets", "good.jsonl"]));
    assert_eq!(good["files"][0]["records"], 2);
    let bad = hardneg(dir.path(), &["validate", "--triplets", "bad.jsonl"]);
    assert_eq!(bad.status.code(), Some(1));
    let summary: Value = serde_json::from_slice(&bad.stdout).unwrap();
    let error = summary["files"][0]["error"].as_str().unwrap();
    assert!(error.contains(":2") && error.contains("expected 3, found 2"), "{error}");
}

#[test]
fn config_errors_are_fatal() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("cfg.toml"),
        "[[endpoints]]\nendpoint_id = \"a\"\nbase_url = \"http://localhost:1/v1\"\nmodel_name = \"m\"\n\n[stages]\npositive_gen = \"a\"\nnegative_gen = \"nope\"\nverify = \"a\"\nrephrase = \"a\"\n",
    )
    .unwrap();
    write_corpus(dir.path(), "synthetic", "p", 1).unwrap();
    let out = hardneg(
        dir.path(),
        &[
            "gen-positives",
            "--config",
            "cfg.toml",
            "--corpus",
            "pages.jsonl",
            "--out",
            "x.jsonl",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`nope`"));
}
