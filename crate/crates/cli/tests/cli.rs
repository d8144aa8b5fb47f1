mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use claimcheck::{read_claims, Label};
use common::{claimcheck, fixture, p, pair_oracle, run_ok};
use serde_json::Value;

fn e2e(name: &str) -> PathBuf {
    fixture("e2e").join(name)
}

/// Decomposes the fixture into `dir`, returning the claims path.
fn decompose(dir: &Path) -> PathBuf {
    run_ok(&[
        "--mock-script", p(&e2e("mock.jsonl")),
        "--out-dir", p(dir),
        "decompose",
        "--input", p(&e2e("prompts.jsonl")),
        "--labels", p(&e2e("labels.jsonl")),
    ]);
    dir.join("claims.jsonl")
}

fn jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn missing_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = claimcheck(&["--out-dir", p(dir.path()), "decompose", "--input", "/nonexistent/prompts.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("not found") && err.contains("/nonexistent/prompts.jsonl"), "{err}");
}

#[test]
fn usage_error_exits_2() {
    assert_eq!(claimcheck(&["score"]).status.code(), Some(2));
    assert_eq!(claimcheck(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn unknown_detector_lists_valid_names() {
    let dir = tempfile::tempdir().unwrap();
    let claims = decompose(dir.path());
    let out = claimcheck(&[
        "--mock-script", p(&e2e("mock.jsonl")),
        "--out-dir", p(dir.path()),
        "score", "--claims", p(&claims), "--detector", "prompt_tf,oracle",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for name in ["prompt_tf", "prompt_prob", "prompt_cot_tf", "selfcheck", "finetuned", "probe"] {
        assert!(err.contains(name), "{name} missing from: {err}");
    }
}

#[test]
fn decompose_summary_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = run_ok(&[
        "--mock-script", p(&e2e("mock.jsonl")),
        "--out-dir", p(dir.path()),
        "decompose", "--input", p(&e2e("prompts.jsonl")), "--labels", p(&e2e("labels.jsonl")),
    ]);
    assert!(stdout.starts_with("decomposed 50 prompts into 150 claims (0 spans flagged)"), "{stdout}");
    let claims = read_claims(dir.path().join("claims.jsonl")).unwrap();
    assert_eq!(claims.len(), 150);
    assert!(claims.iter().all(|c| c.label.is_labeled()));
    // every claim anchored to a verbatim span of its response
    assert!(claims.iter().all(|c| c.original_span.as_deref() == Some(c.text.as_str())));
    let m = json(&dir.path().join("decompose.manifest.json"));
    assert_eq!(m["summary"]["n_claims"], 150);
    assert!(m["inputs"]["prompts"].as_str().unwrap().len() == 64);
    assert_eq!(m["config"]["backend"]["kind"], "mock");
}

#[test]
fn decompose_200_prompts_reports_per_prompt_counts() {
    let dir = tempfile::tempdir().unwrap();
    let mut prompts = String::new();
    let mut script = String::new();
    for i in 0..200 {
        let n = i % 4;
        let facts: Vec<String> = (0..n).map(|k| format!("Item {i} has property {k}.")).collect();
        let response = if n == 0 { format!("Nothing to say about item {i}.") } else { facts.join(" ") };
        prompts.push_str(&serde_json::json!({"prompt_id": format!("q{i:03}"), "prompt": format!("Describe item {i}."), "response": response}).to_string());
        prompts.push('\n');
        for f in &facts {
            script.push_str(&serde_json::json!({"contains": format!("Fact: {f}\n"), "kind": "chat", "reply": f}).to_string());
            script.push('\n');
        }
        script.push_str(&serde_json::json!({"contains": format!("Response: {response}\n\nFacts:"), "kind": "chat", "reply": facts.join("\n")}).to_string());
        script.push('\n');
    }
    script.push_str(r#"{"contains": "Does the following statement", "kind": "chat", "reply": "Yes"}"#);
    fs::write(dir.path().join("p.jsonl"), prompts).unwrap();
    fs::write(dir.path().join("m.jsonl"), script).unwrap();
    let out_dir = dir.path().join("out");
    let stdout = run_ok(&[
        "--mock-script", p(&dir.path().join("m.jsonl")),
        "--out-dir", p(&out_dir),
        "decompose", "--input", p(&dir.path().join("p.jsonl")),
    ]);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "decomposed 200 prompts into 300 claims (0 spans flagged)");
    assert_eq!(lines.len(), 201);
    assert_eq!(lines[1].trim(), "q000\t0");
    assert_eq!(lines[4].trim(), "q003\t3");
    let m = json(&out_dir.join("decompose.manifest.json"));
    assert_eq!(m["summary"]["claims_per_prompt"]["q199"], 3);
    assert_eq!(m["summary"]["labels"]["unlabeled"], 300);
}

#[test]
fn score_rows_per_claim() {
    let dir = tempfile::tempdir().unwrap();
    let claims = decompose(dir.path());
    run_ok(&[
        "--mock-script", p(&e2e("mock.jsonl")),
        "--out-dir", p(dir.path()),
        "score", "--claims", p(&claims), "--prompts", p(&e2e("prompts.jsonl")),
        "--detector", "prompt_tf,selfcheck", "--panel", "--entity", "heuristic",
    ]);
    let scores = jsonl(&dir.path().join("scores.jsonl"));
    assert_eq!(scores.len(), 300);
    let mut per_claim: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for r in &scores {
        per_claim
            .entry(r["claim_id"].as_str().unwrap().into())
            .or_default()
            .push(r["detector_id"].as_str().unwrap().into());
        let v = r["p_factual"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
    assert!(per_claim.values().all(|d| d == &["prompt_tf", "selfcheck"]));

    let panel = jsonl(&dir.path().join("panel.jsonl"));
    assert_eq!(panel.len(), 150 * 32);
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &panel {
        *counts.entry(r["claim_id"].as_str().unwrap()).or_default() += 1;
    }
    assert_eq!(counts.len(), 150);
    assert!(counts.values().all(|n| *n == 32));
    assert!(panel.iter().any(|r| r["spec"] == "entropy/entity/top_percent_15"));
}

#[test]
fn probe_without_model_is_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let claims = decompose(dir.path());
    let out = claimcheck(&["--out-dir", p(dir.path()), "score", "--claims", p(&claims), "--detector", "probe"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--probe-model"));
}

#[test]
fn train_probe_records_validation_bacc_and_grad_check() {
    let dir = tempfile::tempdir().unwrap();
    let claims = decompose(dir.path());
    let stdout = run_ok(&[
        "--mock-script", p(&e2e("mock.jsonl")),
        "--out-dir", p(dir.path()),
        "train-probe", "--claims", p(&claims), "--lr", "0.01", "--epochs", "40", "--grad-check",
    ]);
    let line = stdout.lines().find(|l| l.starts_with("gradient check:")).unwrap();
    assert!(line.starts_with("gradient check: PASS (max relative error "), "{line}");
    let m = json(&dir.path().join("train-probe.manifest.json"));
    assert_eq!(m["summary"]["embedding_type"], "type4");
    assert!(m["summary"]["validation_bacc"].as_f64().unwrap() > 0.5);
    assert_eq!(m["summary"]["grad_check"]["pass"], true);
    assert_eq!(m["summary"]["split_sizes"], serde_json::json!([105, 30, 15]));
    assert!(dir.path().join("probe.json").is_file());
}

#[test]
fn search_embedding_runs_four_types() {
    let dir = tempfile::tempdir().unwrap();
    let claims = decompose(dir.path());
    run_ok(&[
        "--mock-script", p(&e2e("mock.jsonl")),
        "--out-dir", p(dir.path()),
        "train-probe", "--claims", p(&claims), "--lr", "0.01", "--epochs", "20", "--search-embedding",
    ]);
    let m = json(&dir.path().join("train-probe.manifest.json"));
    let runs = m["summary"]["runs"].as_array().unwrap();
    let types: Vec<&str> = runs.iter().map(|r| r["embedding_type"].as_str().unwrap()).collect();
    assert_eq!(types, ["type1", "type2", "type3", "type4"]);
    // winner is the first type with the highest validation BAcc
    let best = runs
        .iter()
        .map(|r| r["validation_bacc"].as_f64().unwrap())
        .fold(f64::NEG_INFINITY, f64::max);
    let winner = runs.iter().find(|r| r["validation_bacc"].as_f64().unwrap() == best).unwrap();
    assert_eq!(m["summary"]["embedding_type"], winner["embedding_type"]);
    let cache = jsonl(&dir.path().join("embeddings.jsonl"));
    assert_eq!(cache.len(), 4 * 150);
}

fn ten_claims(dir: &Path) -> PathBuf {
    let claims = decompose(&dir.join("d"));
    let text: String = fs::read_to_string(claims).unwrap().lines().take(10).map(|l| format!("{l}\n")).collect();
    let path = dir.join("ten.jsonl");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn build_ft_data_counts() {
    let dir = tempfile::tempdir().unwrap();
    let claims = ten_claims(dir.path());
    let labels: Vec<Label> = read_claims(&claims).unwrap().iter().map(|c| c.label).collect();

    let out = dir.path().join("a");
    run_ok(&["--out-dir", p(&out), "build-ft-data", "--claims", p(&claims)]);
    let rows = jsonl(&out.join("ft_data.jsonl"));
    assert_eq!(rows.len(), 20);
    assert_eq!(rows.iter().filter(|r| r["task"] == "detect").count(), 10);
    assert_eq!(rows.iter().filter(|r| r["task"] == "qa").count(), 10);

    let out = dir.path().join("b");
    run_ok(&["--out-dir", p(&out), "build-ft-data", "--claims", p(&claims), "--no-aux", "--no-rationale"]);
    let rows = jsonl(&out.join("ft_data.jsonl"));
    assert_eq!(rows.len(), 10);
    for (r, l) in rows.iter().zip(&labels) {
        let want = if *l == Label::Factual { "True" } else { "False" };
        assert_eq!(r["output"], want);
    }

    let out = dir.path().join("c");
    run_ok(&["--out-dir", p(&out), "build-ft-data", "--claims", p(&claims), "--half"]);
    let m = json(&out.join("build-ft-data.manifest.json"));
    let n_f = labels.iter().filter(|l| **l == Label::Factual).count();
    let expect = n_f.div_ceil(2) + (10 - n_f).div_ceil(2);
    assert_eq!(m["summary"]["half_data_claim_ids"].as_array().unwrap().len(), expect);
    assert_eq!(m["summary"]["counts"]["total"], 2 * expect);
    let side = json(&out.join("ft_data.jsonl.manifest.json"));
    assert_eq!(side["n_claims_used"], expect);
}

/// Decompose + score prompt_tf into `dir`; returns (claims, scores).
fn scored(dir: &Path) -> (PathBuf, PathBuf) {
    let claims = decompose(dir);
    run_ok(&[
        "--mock-script", p(&e2e("mock.jsonl")),
        "--out-dir", p(dir),
        "score", "--claims", p(&claims), "--detector", "prompt_tf",
    ]);
    (claims, dir.join("scores.jsonl"))
}

/// prompt_tf scores and labels for the validation subset, rebuilt from files.
fn validation_scores(dir: &Path, claims: &Path, scores: &Path) -> (Vec<f64>, Vec<Label>) {
    let split = claimcheck::split_dataset(
        &read_claims(claims).unwrap(),
        claimcheck::SplitRatios::default(),
        0,
        false,
    )
    .unwrap();
    let _ = dir;
    let by_id: BTreeMap<String, f64> = jsonl(scores)
        .into_iter()
        .map(|r| (r["claim_id"].as_str().unwrap().to_string(), r["p_factual"].as_f64().unwrap()))
        .collect();
    let claims = read_claims(claims).unwrap();
    let mut s = Vec::new();
    let mut l = Vec::new();
    for c in claims.iter().filter(|c| split.validation.contains(&c.id)) {
        s.push(by_id[&c.id]);
        l.push(c.label);
    }
    (s, l)
}

#[test]
fn calibrate_matches_brute_force_oracles() {
    let dir = tempfile::tempdir().unwrap();
    let (claims, scores) = scored(dir.path());
    let (s, l) = validation_scores(dir.path(), &claims, &scores);
    assert_eq!(s.len(), 30);

    let out = dir.path().join("cal");
    let common_args = ["calibrate", "--scores", p(&scores), "--score-id", "prompt_tf", "--claims", p(&claims)];
    let mut args = vec!["--out-dir", p(&out)];
    args.extend(common_args);
    run_ok(&args);
    let single = json(&out.join("thresholds_single.json"));
    let tau = single["thresholds"]["tau"].as_f64().unwrap();
    // best over every achievable split of the sorted scores
    let cands = common::oracle_candidates(&s);
    let best = cands
        .iter()
        .map(|t| common::naive_bacc(&common::predict_single(&s, *t), &l, false).unwrap())
        .fold(common::Frac::new(0, 1), |a, b| if b > a { b } else { a });
    let got = common::naive_bacc(&common::predict_single(&s, tau), &l, false).unwrap();
    assert!(got == best);
    assert!((single["bacc"].as_f64().unwrap() - best.value()).abs() < 1e-12);

    args.extend(["--mode", "dual", "--min-bacc", "0.70"]);
    run_ok(&args);
    let dual = json(&out.join("thresholds_dual.json"));
    let want = pair_oracle(&s, &l, 0.70).expect("feasible on fixture");
    assert_eq!(dual["thresholds"]["alpha_low"].as_f64().unwrap(), want.alpha_low);
    assert_eq!(dual["thresholds"]["alpha_high"].as_f64().unwrap(), want.alpha_high);
    assert_eq!(dual["n_unknown"].as_u64().unwrap() as usize, want.n_unknown);
    assert!((dual["bacc_unknown"].as_f64().unwrap() - want.bacc_unknown).abs() < 1e-12);
}

#[test]
fn infeasible_band_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let (claims, scores) = scored(dir.path());
    let out = claimcheck(&[
        "--out-dir", p(dir.path()),
        "calibrate", "--scores", p(&scores), "--score-id", "prompt_tf", "--claims", p(&claims),
        "--mode", "dual", "--min-bacc", "1.0",
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn evaluate_writes_strata_and_histogram() {
    let dir = tempfile::tempdir().unwrap();
    let (claims, scores) = scored(dir.path());
    let sel = ["--scores", p(&scores), "--score-id", "prompt_tf", "--claims", p(&claims)];
    let mut cal = vec!["--out-dir", p(dir.path()), "calibrate"];
    cal.extend(sel);
    run_ok(&cal);
    let (mock, thresholds, prompts) =
        (e2e("mock.jsonl"), dir.path().join("thresholds_single.json"), e2e("prompts.jsonl"));
    let mut ev = vec![
        "--mock-script", p(&mock),
        "--out-dir", p(dir.path()), "evaluate",
        "--thresholds", p(&thresholds),
        "--prompts", p(&prompts),
        "--stratify-length", "--histogram", "--bins", "10", "--subset", "all",
    ];
    ev.extend(sel);
    run_ok(&ev);
    let report = json(&dir.path().join("report.json"));
    assert_eq!(report["length_unit"], "tokens:mock-e2e");
    let strata = report["strata"].as_object().unwrap();
    assert_eq!(strata.len(), 3);
    let total: u64 = strata
        .values()
        .map(|s| ["tp", "fn", "tn", "fp", "n_unknown"].iter().map(|k| s[k].as_u64().unwrap()).sum::<u64>())
        .sum();
    assert_eq!(total, 150);
    let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("length:gt1000,")), "{csv}");
    let hist = fs::read_to_string(dir.path().join("histogram.csv")).unwrap();
    assert_eq!(hist.lines().count(), 11);
    let counted: u64 = hist
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(2).map(|v| v.parse::<u64>().unwrap()).sum::<u64>())
        .sum();
    assert_eq!(counted, 150);

    run_ok(&["--out-dir", p(dir.path()), "report", "--reports", p(&dir.path().join("report.json"))]);
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 4);
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        format!(
            "seed = 3\nout_dir = {:?}\n[backend]\nmock_script = {:?}\n[score]\ndetectors = [\"prompt_tf\"]\n",
            p(&dir.path().join("from_config")),
            p(&e2e("mock.jsonl"))
        ),
    )
    .unwrap();
    let claims = decompose(&dir.path().join("d"));
    let flag_out = dir.path().join("from_flag");
    run_ok(&["--config", p(&cfg), "--out-dir", p(&flag_out), "--seed", "9", "score", "--claims", p(&claims)]);
    let m = json(&flag_out.join("score.manifest.json"));
    assert_eq!(m["seed"], 9);
    assert_eq!(m["config"]["score"]["detectors"], serde_json::json!(["prompt_tf"]));
    assert!(!dir.path().join("from_config").exists());

    fs::write(&cfg, "[score]\ndetector = 1\n").unwrap();
    let out = claimcheck(&["--config", p(&cfg), "score", "--claims", p(&claims)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bacc_table_covers_every_panel_spec() {
    let dir = tempfile::tempdir().unwrap();
    let claims = decompose(dir.path());
    run_ok(&[
        "--mock-script", p(&e2e("mock.jsonl")),
        "--out-dir", p(dir.path()),
        "score", "--claims", p(&claims), "--prompts", p(&e2e("prompts.jsonl")), "--panel", "--entity", "heuristic",
    ]);
    run_ok(&[
        "--out-dir", p(dir.path()),
        "calibrate", "--scores", p(&dir.path().join("panel.jsonl")), "--score-id", "all", "--claims", p(&claims),
    ]);
    let table = fs::read_to_string(dir.path().join("bacc_table.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 32);
    assert!(rows[0].starts_with("probability/all/arithmetic,30,"));
    assert!(rows.iter().all(|r| r.split(',').nth(4) == Some("15")));
}
