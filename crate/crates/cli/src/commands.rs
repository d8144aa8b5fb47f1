use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use claimcheck::claims::{label_claims, ClaimPipeline, FileLabeler};
use claimcheck::detectors::{Detector, DetectorConfig, DetectorKind};
use claimcheck::estimators::{score_claim_panel, EntityMarker, PanelRecord};
use claimcheck::eval::{
    evaluate as evaluate_scores, score_histogram, search_dual_thresholds, search_threshold,
    stratify_by_length, write_histogram_csv, write_report_csv, LengthBounds, StratumItem,
};
use claimcheck::finetune::{write_dataset, DatasetBuilder, EvidenceMap};
use claimcheck::gateway::{collect_all, Gateway};
use claimcheck::manifest::Manifest;
use claimcheck::probe::{
    build_embedding_with, embed_claims, gradient_check, load_probe, probe_score, save_probe,
    train_probe as fit_probe, EmbeddingCache, EmbeddingType, ProbeMeta, TrainedProbe,
};
use claimcheck::{
    jsonl, read_claims, split_dataset, write_claims, Claim, DatasetSplit, DetectorScore,
    EvalReport, Label, PromptRecord, ThresholdConfig,
};
use serde::{Deserialize, Serialize};

// stdout may be a closed pipe (`| head`); losing progress lines is fine there.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

use crate::config::{BackendConfig, BackendKind, EntityStrategy, Mode, RunConfig, Subset};
use crate::{
    BuildArgs, CalibrateArgs, DecomposeArgs, EvaluateArgs, ReportArgs, ScoreArgs, ScoreSelection,
    TrainProbeArgs,
};

const PROBE_DETECTOR: &str = "probe";
const GRAD_CHECK_TOLERANCE: f64 = 1e-4;
const ALL_SCORES: &str = "all";

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what} file not found: {}", path.display());
    }
    Ok(())
}

fn out_file(cfg: &RunConfig, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("cannot create output directory {}", cfg.out_dir.display()))?;
    Ok(cfg.out_dir.join(name))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T> {
    require_file(path, what)?;
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).with_context(|| format!("invalid {what} file {}", path.display()))
}

fn new_manifest(command: &str, cfg: &RunConfig) -> Result<Manifest> {
    let mut m = Manifest::new(command, cfg, cfg.seed)?;
    if let Some(script) = &cfg.backend.mock_script {
        if cfg.backend.kind == BackendKind::Mock {
            m.add_input("mock_script", script)?;
        }
    }
    Ok(m)
}

fn finish(mut m: Manifest, cfg: &RunConfig, outputs: &[(&str, &Path)]) -> Result<()> {
    for (name, path) in outputs {
        m.add_output(name, path)?;
    }
    let path = out_file(cfg, &format!("{}.manifest.json", m.command))?;
    m.write(path)?;
    Ok(())
}

fn load_prompts(path: &Path) -> Result<HashMap<String, PromptRecord>> {
    require_file(path, "prompts")?;
    let records: Vec<PromptRecord> = jsonl::read(path)?;
    Ok(records.into_iter().map(|r| (r.prompt_id.clone(), r)).collect())
}

fn load_claims(path: &Path) -> Result<Vec<Claim>> {
    require_file(path, "claims")?;
    Ok(read_claims(path)?)
}

fn labeled(claims: &[Claim]) -> Vec<Claim> {
    claims.iter().filter(|c| c.label.is_labeled()).cloned().collect()
}

fn resolve_split(cfg: &RunConfig, labeled: &[Claim], path: Option<&Path>) -> Result<DatasetSplit> {
    match path {
        Some(p) => read_json(p, "split"),
        None => Ok(split_dataset(labeled, cfg.split.ratios, cfg.seed, cfg.split.stratified)?),
    }
}

fn subset_of(claims: &[Claim], split: &DatasetSplit, subset: Subset) -> Vec<Claim> {
    let ids: HashSet<&str> = match subset {
        Subset::Train => split.train.iter().map(String::as_str).collect(),
        Subset::Validation => split.validation.iter().map(String::as_str).collect(),
        Subset::Test => split.test.iter().map(String::as_str).collect(),
        Subset::All => return claims.to_vec(),
    };
    claims.iter().filter(|c| ids.contains(c.id.as_str())).cloned().collect()
}

pub fn decompose(cfg: RunConfig, a: DecomposeArgs) -> Result<()> {
    require_file(&a.input, "input")?;
    if let Some(l) = &a.labels {
        require_file(l, "labels")?;
    }
    let records: Vec<PromptRecord> = jsonl::read(&a.input)?;
    let gw = cfg.gateway()?;
    let pipeline = ClaimPipeline::new(gw.clone(), cfg.pipeline.clone())?;
    let per_record = collect_all(gw.map_concurrent(&records, |_, r| pipeline.process(r)))?;

    let mut per_prompt = BTreeMap::new();
    let mut flagged = 0;
    let mut claims = Vec::new();
    for (record, spans) in records.iter().zip(per_record) {
        per_prompt.insert(record.prompt_id.clone(), spans.len());
        for s in spans {
            flagged += usize::from(s.flagged());
            claims.push(s.claim);
        }
    }
    if let Some(l) = &a.labels {
        claims = label_claims(claims, &FileLabeler::load(l)?)?;
    }
    let count = |l: Label| claims.iter().filter(|c| c.label == l).count();

    let out = out_file(&cfg, "claims.jsonl")?;
    write_claims(&claims, &out)?;
    let mut m = new_manifest("decompose", &cfg)?;
    m.add_input("prompts", &a.input)?;
    if let Some(l) = &a.labels {
        m.add_input("labels", l)?;
    }
    m.set("n_prompts", records.len())?;
    m.set("n_claims", claims.len())?;
    m.set("claims_per_prompt", &per_prompt)?;
    m.set("flagged_spans", flagged)?;
    m.set(
        "labels",
        BTreeMap::from([
            ("factual", count(Label::Factual)),
            ("hallucinated", count(Label::Hallucinated)),
            ("unlabeled", count(Label::Unlabeled)),
        ]),
    )?;
    finish(m, &cfg, &[("claims", &out)])?;

    say!(
        "decomposed {} prompts into {} claims ({flagged} spans flagged)",
        records.len(),
        claims.len()
    );
    for (id, n) in &per_prompt {
        say!("  {id}\t{n}");
    }
    Ok(())
}

fn valid_detector_names() -> String {
    let mut names: Vec<&str> = DetectorKind::ALL.iter().map(|k| k.name()).collect();
    names.push(PROBE_DETECTOR);
    names.join(", ")
}

fn finetuned_gateway(cfg: &RunConfig, a: &ScoreArgs) -> Result<Gateway> {
    let backend = match (&a.finetuned_mock_script, &cfg.finetuned_backend) {
        (Some(p), _) => BackendConfig {
            kind: BackendKind::Mock,
            mock_script: Some(p.clone()),
            http: None,
        },
        (None, Some(b)) => b.clone(),
        (None, None) => bail!(
            "the finetuned detector needs --finetuned-mock-script or a [finetuned_backend] config section"
        ),
    };
    backend.gateway(cfg.gateway)
}

fn probe_scores(gw: &Gateway, claims: &[Claim], model_path: &Path) -> Result<Vec<DetectorScore>> {
    let (model, meta) = load_probe(model_path)?;
    let t = meta
        .embedding_type
        .ok_or_else(|| anyhow!("probe file {} does not record its embedding type", model_path.display()))?;
    let scored = gw.map_concurrent(claims, |_, c| {
        let h = gw.hidden_states(&c.text)?;
        let v = build_embedding_with(&h, t, meta.include_embedding_layer)?;
        Ok(DetectorScore {
            claim_id: c.id.clone(),
            detector_id: PROBE_DETECTOR.into(),
            p_factual: probe_score(&model, &v)?,
            rationale: None,
        })
    });
    Ok(collect_all(scored)?)
}

pub fn score(mut cfg: RunConfig, a: ScoreArgs) -> Result<()> {
    if !a.detector.is_empty() {
        cfg.score.detectors = a.detector.clone();
    }
    cfg.score.panel |= a.panel;
    if a.probe_model.is_some() {
        cfg.score.probe_model = a.probe_model.clone();
    }
    if let Some(n) = a.samples {
        cfg.score.selfcheck_samples = n;
    }
    if let Some(e) = a.entity {
        cfg.score.entity = e;
    }
    let mut kinds = Vec::new();
    let mut use_probe = cfg.score.probe_model.is_some();
    for name in &cfg.score.detectors {
        if name == PROBE_DETECTOR {
            use_probe = true;
        } else {
            kinds.push(name.parse::<DetectorKind>().map_err(|_| {
                anyhow!("unknown detector {name:?}; valid: {}", valid_detector_names())
            })?);
        }
    }
    if kinds.is_empty() && !use_probe && !cfg.score.panel {
        bail!("nothing to score: pass --detector, --probe-model or --panel");
    }
    let probe_path = match (use_probe, &cfg.score.probe_model) {
        (true, Some(p)) => {
            require_file(p, "probe model")?;
            Some(p.clone())
        }
        (true, None) => bail!("the probe detector needs --probe-model"),
        _ => None,
    };
    let claims = load_claims(&a.claims)?;
    let prompts = match &a.prompts {
        Some(p) => Some(load_prompts(p)?),
        None => None,
    };
    let record_of = |c: &Claim| prompts.as_ref().and_then(|m| m.get(&c.prompt_id));
    let gw = cfg.gateway()?;

    let mut per_detector: Vec<Vec<DetectorScore>> = Vec::new();
    for kind in &kinds {
        let mut dc = DetectorConfig::for_kind(*kind);
        dc.n_samples = cfg.score.selfcheck_samples;
        dc.temperature = cfg.score.selfcheck_temperature;
        dc.normalize_label_probs = cfg.score.normalize_label_probs;
        dc.seed = cfg.seed;
        let gateway = if *kind == DetectorKind::Finetuned {
            finetuned_gateway(&cfg, &a)?
        } else {
            gw.clone()
        };
        let det = Detector::with_config(*kind, dc, gateway)?;
        if *kind == DetectorKind::Selfcheck {
            if let Some(c) = claims.iter().find(|c| record_of(c).is_none()) {
                bail!("selfcheck needs --prompts containing prompt {:?}", c.prompt_id);
            }
        }
        let scores = gw.map_concurrent(&claims, |_, c| {
            let prompt = record_of(c).map_or("", |r| r.prompt.as_str());
            det.score(c, prompt)
        });
        per_detector.push(collect_all(scores)?);
    }
    if let Some(p) = &probe_path {
        per_detector.push(probe_scores(&gw, &claims, p)?);
    }
    // claim-major order
    let rows: Vec<DetectorScore> = (0..claims.len())
        .flat_map(|i| per_detector.iter().map(move |d| d[i].clone()))
        .collect();

    let mut m = new_manifest("score", &cfg)?;
    m.add_input("claims", &a.claims)?;
    if let Some(p) = &a.prompts {
        m.add_input("prompts", p)?;
    }
    if let Some(p) = &probe_path {
        m.add_input("probe_model", p)?;
    }
    let mut outputs = Vec::new();
    let scores_path = out_file(&cfg, "scores.jsonl")?;
    if !rows.is_empty() {
        jsonl::write(&scores_path, &rows)?;
        outputs.push(("scores", scores_path.as_path()));
    }
    m.set("n_claims", claims.len())?;
    m.set("n_detector_rows", rows.len())?;

    let panel_path = out_file(&cfg, "panel.jsonl")?;
    if cfg.score.panel {
        let marker = match cfg.score.entity {
            EntityStrategy::Llm => EntityMarker::llm(gw.clone()),
            EntityStrategy::Heuristic => EntityMarker::Heuristic,
        };
        let panel = gw.map_concurrent(&claims, |_, c| score_claim_panel(&gw, c, record_of(c), &marker));
        let panel: Vec<PanelRecord> = collect_all(panel)?.into_iter().flatten().collect();
        let unavailable = panel.iter().filter(|r| !r.available).count();
        jsonl::write(&panel_path, &panel)?;
        m.set("n_panel_rows", panel.len())?;
        m.set("n_panel_unavailable", unavailable)?;
        outputs.push(("panel", panel_path.as_path()));
    }
    finish(m, &cfg, &outputs)?;
    say!(
        "scored {} claims: {} detector rows{}",
        claims.len(),
        rows.len(),
        if cfg.score.panel {
            format!(", {} panel rows", claims.len() * 32)
        } else {
            String::new()
        }
    );
    Ok(())
}

#[derive(Serialize)]
struct EmbeddingRun {
    embedding_type: EmbeddingType,
    validation_bacc: Option<f64>,
    selection_bacc: f64,
    best_epoch: usize,
    epochs_run: usize,
}

pub fn train_probe(mut cfg: RunConfig, a: TrainProbeArgs) -> Result<()> {
    if let Some(e) = &a.embedding {
        cfg.probe.embedding = e.parse()?;
    }
    cfg.probe.search_embedding |= a.search_embedding;
    cfg.probe.grad_check |= a.grad_check;
    cfg.probe.include_embedding_layer |= a.include_embedding_layer;
    if let Some(n) = a.epochs {
        cfg.probe.train.epochs = n;
    }
    if let Some(n) = a.hidden {
        cfg.probe.train.hidden_width = n;
    }
    if let Some(lr) = a.lr {
        cfg.probe.train.learning_rate = lr;
    }
    cfg.probe.train.seed = cfg.seed;

    let claims = labeled(&load_claims(&a.claims)?);
    let split = resolve_split(&cfg, &claims, a.split.as_deref())?;
    let types: Vec<EmbeddingType> = if cfg.probe.search_embedding {
        EmbeddingType::ALL.to_vec()
    } else {
        vec![cfg.probe.embedding]
    };
    let gw = cfg.gateway()?;
    let mut cache = EmbeddingCache::new();
    embed_claims(&gw, &claims, &types, cfg.probe.include_embedding_layer, &mut cache)?;

    let examples = |subset: Subset, t: EmbeddingType| -> Vec<(Vec<f64>, Label)> {
        subset_of(&claims, &split, subset)
            .into_iter()
            .map(|c| (cache.get(&c.id, t).expect("embedded").clone(), c.label))
            .collect()
    };
    let mut runs = Vec::new();
    let mut best: Option<(EmbeddingType, TrainedProbe)> = None;
    for &t in &types {
        let trained = fit_probe(&examples(Subset::Train, t), &examples(Subset::Validation, t), &cfg.probe.train)?;
        say!(
            "{t}: {} BAcc {:.4} at epoch {}",
            if trained.selected_on_train { "train" } else { "validation" },
            trained.best_bacc,
            trained.best_epoch
        );
        runs.push(EmbeddingRun {
            embedding_type: t,
            validation_bacc: (!trained.selected_on_train).then_some(trained.best_bacc),
            selection_bacc: trained.best_bacc,
            best_epoch: trained.best_epoch,
            epochs_run: trained.history.len(),
        });
        if best.as_ref().is_none_or(|(_, b)| trained.best_bacc > b.best_bacc) {
            best = Some((t, trained));
        }
    }
    let (t, trained) = best.expect("at least one embedding type");
    let meta = ProbeMeta {
        embedding_type: Some(t),
        include_embedding_layer: cfg.probe.include_embedding_layer,
        validation_bacc: (!trained.selected_on_train).then_some(trained.best_bacc),
        best_epoch: Some(trained.best_epoch),
    };
    let model_path = out_file(&cfg, "probe.json")?;
    save_probe(&trained.model, &meta, cfg.probe.encoding, &model_path)?;
    let cache_path = out_file(&cfg, "embeddings.jsonl")?;
    cache.save(&cache_path)?;
    let split_path = out_file(&cfg, "split.json")?;
    write_json(&split_path, &split)?;

    let mut m = new_manifest("train-probe", &cfg)?;
    m.add_input("claims", &a.claims)?;
    m.set("embedding_type", t)?;
    m.set("validation_bacc", meta.validation_bacc)?;
    m.set("best_epoch", trained.best_epoch)?;
    m.set("runs", &runs)?;
    m.set("split_sizes", [split.train.len(), split.validation.len(), split.test.len()])?;

    if cfg.probe.grad_check {
        let train = examples(Subset::Train, t);
        let mut worst: f64 = 0.0;
        for (x, l) in train.iter().take(5) {
            worst = worst.max(gradient_check(&trained.model, x, *l == Label::Factual)?);
        }
        let pass = worst < GRAD_CHECK_TOLERANCE;
        say!(
            "gradient check: {} (max relative error {worst:.3e})",
            if pass { "PASS" } else { "FAIL" }
        );
        m.set("grad_check", serde_json::json!({"pass": pass, "max_relative_error": worst}))?;
    }
    finish(
        m,
        &cfg,
        &[("probe_model", &model_path), ("embeddings", &cache_path), ("split", &split_path)],
    )?;
    say!("selected {t}; model written to {}", model_path.display());
    Ok(())
}

#[derive(Deserialize)]
struct EvidenceRecord {
    claim_id: String,
    evidence: String,
}

pub fn build_ft_data(mut cfg: RunConfig, a: BuildArgs) -> Result<()> {
    let opts = &mut cfg.build;
    opts.include_aux_qa &= !a.no_aux;
    opts.include_rationales &= !a.no_rationale;
    opts.include_paraphrase |= a.paraphrase;
    opts.half_data |= a.half;
    opts.seed = cfg.seed;

    let all = load_claims(&a.claims)?;
    let claims = labeled(&all);
    if claims.len() < all.len() {
        log::warn!("skipping {} unlabeled claims", all.len() - claims.len());
    }
    let mut builder = DatasetBuilder::new(cfg.gateway()?);
    if let Some(p) = &a.evidence {
        require_file(p, "evidence")?;
        let records: Vec<EvidenceRecord> = jsonl::read(p)?;
        let map: EvidenceMap = records.into_iter().map(|r| (r.claim_id, r.evidence)).collect();
        builder = builder.with_evidence(map);
    }
    let examples = builder.build_dataset(&claims, &cfg.build)?;
    let path = out_file(&cfg, "ft_data.jsonl")?;
    let dm = write_dataset(&path, &examples, &cfg.build, claims.len())?;

    let mut m = new_manifest("build-ft-data", &cfg)?;
    m.add_input("claims", &a.claims)?;
    if let Some(p) = &a.evidence {
        m.add_input("evidence", p)?;
    }
    m.set("skipped_unlabeled", all.len() - claims.len())?;
    m.set("counts", &dm.counts)?;
    m.set("n_claims_used", dm.n_claims_used)?;
    m.set("half_data_claim_ids", cfg.build.half_data.then_some(&dm.used_claim_ids))?;
    m.set("ordering", &dm.ordering)?;
    finish(m, &cfg, &[("dataset", &path)])?;
    say!(
        "wrote {} examples ({} detect, {} qa) from {} claims",
        dm.counts["total"], dm.counts["detect"], dm.counts["qa"], dm.n_claims_used
    );
    Ok(())
}

/// Score rows from either detector output or panel output, keyed by claim.
fn load_scores(path: &Path, score_id: &str) -> Result<HashMap<String, Option<f64>>> {
    require_file(path, "scores")?;
    let rows: Vec<serde_json::Value> = jsonl::read(path)?;
    let mut out = HashMap::new();
    for row in rows {
        let claim = row["claim_id"].as_str().unwrap_or_default().to_string();
        if row["detector_id"].as_str() == Some(score_id) {
            out.insert(claim, row["p_factual"].as_f64());
        } else if row["spec"].as_str() == Some(score_id) {
            out.insert(claim, row["score"].as_f64());
        }
    }
    if out.is_empty() {
        bail!("no rows for score id {score_id:?} in {}", path.display());
    }
    Ok(out)
}

struct Selected {
    claims: Vec<Claim>,
    scores: Vec<f64>,
    labels: Vec<Label>,
    unavailable: usize,
}

fn select(cfg: &RunConfig, s: &ScoreSelection, default_subset: Subset) -> Result<(Selected, Subset)> {
    let subset = s.subset.unwrap_or(default_subset);
    let claims = labeled(&load_claims(&s.claims)?);
    let scores = load_scores(&s.scores, &s.score_id)?;
    let chosen = match subset {
        Subset::All => claims,
        _ => {
            let split = resolve_split(cfg, &claims, s.split.as_deref())?;
            subset_of(&claims, &split, subset)
        }
    };
    let mut sel = Selected {
        claims: Vec::new(),
        scores: Vec::new(),
        labels: Vec::new(),
        unavailable: 0,
    };
    for c in chosen {
        match scores.get(&c.id) {
            None => bail!("claim {} has no {:?} score in {}", c.id, s.score_id, s.scores.display()),
            Some(None) => sel.unavailable += 1,
            Some(Some(v)) => {
                sel.scores.push(*v);
                sel.labels.push(c.label);
                sel.claims.push(c);
            }
        }
    }
    if sel.unavailable > 0 {
        log::warn!("{} claims have no {:?} score (estimator unavailable)", sel.unavailable, s.score_id);
    }
    Ok((sel, subset))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ThresholdsFile {
    pub score_id: String,
    pub subset: Subset,
    pub n: usize,
    pub thresholds: ThresholdConfig,
    pub bacc: Option<f64>,
    pub bacc_unknown: Option<f64>,
    pub n_unknown: Option<usize>,
    pub min_bacc: Option<f64>,
}

pub fn calibrate(mut cfg: RunConfig, a: CalibrateArgs) -> Result<()> {
    if let Some(m) = a.mode {
        cfg.calibrate.mode = m;
    }
    if let Some(b) = a.min_bacc {
        cfg.calibrate.min_bacc = b;
    }
    if let Some(s) = a.selection.subset {
        cfg.calibrate.subset = s;
    }
    if a.selection.score_id == ALL_SCORES {
        return bacc_table(cfg, a);
    }
    let (sel, subset) = select(&cfg, &a.selection, cfg.calibrate.subset)?;
    let file = match cfg.calibrate.mode {
        Mode::Single => {
            let fit = search_threshold(&sel.scores, &sel.labels)?;
            say!("tau = {} (BAcc {:.4})", fit.tau, fit.bacc);
            ThresholdsFile {
                score_id: a.selection.score_id.clone(),
                subset,
                n: sel.scores.len(),
                thresholds: ThresholdConfig::Single { tau: fit.tau },
                bacc: Some(fit.bacc),
                bacc_unknown: None,
                n_unknown: None,
                min_bacc: None,
            }
        }
        Mode::Dual => {
            let fit = search_dual_thresholds(&sel.scores, &sel.labels, cfg.calibrate.min_bacc)?;
            say!(
                "alpha_low = {}, alpha_high = {} (BAcc-unknown {:.4}, {} unknown)",
                fit.alpha_low, fit.alpha_high, fit.bacc_unknown, fit.n_unknown
            );
            ThresholdsFile {
                score_id: a.selection.score_id.clone(),
                subset,
                n: sel.scores.len(),
                thresholds: ThresholdConfig::Dual {
                    alpha_low: fit.alpha_low,
                    alpha_high: fit.alpha_high,
                },
                bacc: Some(fit.bacc_decided),
                bacc_unknown: Some(fit.bacc_unknown),
                n_unknown: Some(fit.n_unknown),
                min_bacc: Some(cfg.calibrate.min_bacc),
            }
        }
    };
    let name = match cfg.calibrate.mode {
        Mode::Single => "thresholds_single.json",
        Mode::Dual => "thresholds_dual.json",
    };
    let path = out_file(&cfg, name)?;
    write_json(&path, &file)?;
    let mut m = new_manifest("calibrate", &cfg)?;
    m.add_input("scores", &a.selection.scores)?;
    m.add_input("claims", &a.selection.claims)?;
    m.set("score_id", &a.selection.score_id)?;
    m.set("n", sel.scores.len())?;
    m.set("unavailable", sel.unavailable)?;
    m.set("result", &file)?;
    m.command = format!("calibrate-{}", serde_json::to_value(cfg.calibrate.mode)?.as_str().unwrap_or("x"));
    finish(m, &cfg, &[("thresholds", &path)])
}

/// Score ids in a score file, first-seen order.
fn score_ids(path: &Path) -> Result<Vec<String>> {
    require_file(path, "scores")?;
    let rows: Vec<serde_json::Value> = jsonl::read(path)?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for row in rows {
        let id = row["detector_id"].as_str().or(row["spec"].as_str()).unwrap_or_default();
        if seen.insert(id.to_string()) {
            out.push(id.to_string());
        }
    }
    Ok(out)
}

/// Single-threshold fit per score id on the calibration subset, applied to
/// the evaluation subset: one row per id in bacc_table.csv.
fn bacc_table(cfg: RunConfig, a: CalibrateArgs) -> Result<()> {
    if cfg.calibrate.mode != Mode::Single {
        bail!("--score-id {ALL_SCORES} supports single mode only");
    }
    let path = out_file(&cfg, "bacc_table.csv")?;
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["score_id", "n_fit", "tau", "fit_bacc", "n_eval", "eval_bacc", "unavailable"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let ids = score_ids(&a.selection.scores)?;
    for id in &ids {
        let mut s = a.selection.clone();
        s.score_id = id.clone();
        s.subset = None;
        let (fit_sel, _) = select(&cfg, &s, cfg.calibrate.subset)?;
        let (eval_sel, _) = select(&cfg, &s, cfg.evaluate.subset)?;
        let row = match search_threshold(&fit_sel.scores, &fit_sel.labels) {
            Ok(fit) => {
                let r = evaluate_scores(&eval_sel.scores, &eval_sel.labels, ThresholdConfig::Single { tau: fit.tau })?;
                [fit.tau.to_string(), fit.bacc.to_string(), opt(r.bacc)]
            }
            // too few scored claims of one class (e.g. no entity tokens)
            Err(claimcheck::Error::UndefinedMetric(_)) => [String::new(), String::new(), String::new()],
            Err(e) => return Err(e.into()),
        };
        w.write_record([
            id.clone(),
            fit_sel.scores.len().to_string(),
            row[0].clone(),
            row[1].clone(),
            eval_sel.scores.len().to_string(),
            row[2].clone(),
            (fit_sel.unavailable + eval_sel.unavailable).to_string(),
        ])?;
    }
    w.flush()?;
    let mut m = new_manifest("calibrate-table", &cfg)?;
    m.add_input("scores", &a.selection.scores)?;
    m.add_input("claims", &a.selection.claims)?;
    m.set("n_score_ids", ids.len())?;
    finish(m, &cfg, &[("bacc_table", &path)])?;
    say!("wrote {} rows to {}", ids.len(), path.display());
    Ok(())
}

/// Evaluation report plus the selection it was computed on.
#[derive(Debug, Serialize, Deserialize)]
pub struct ReportFile {
    pub score_id: String,
    pub subset: Subset,
    pub unavailable: usize,
    #[serde(flatten)]
    pub report: EvalReport,
}

pub fn evaluate(mut cfg: RunConfig, a: EvaluateArgs) -> Result<()> {
    cfg.evaluate.stratify_length |= a.stratify_length;
    cfg.evaluate.histogram |= a.histogram;
    if let Some(b) = a.bins {
        cfg.evaluate.histogram_bins = b;
    }
    if let Some(s) = a.selection.subset {
        cfg.evaluate.subset = s;
    }
    let th: ThresholdsFile = read_json(&a.thresholds, "thresholds")?;
    if th.score_id != a.selection.score_id {
        log::warn!(
            "thresholds were fit on {:?} but evaluating {:?}",
            th.score_id, a.selection.score_id
        );
    }
    let (sel, subset) = select(&cfg, &a.selection, cfg.evaluate.subset)?;
    let mut report = evaluate_scores(&sel.scores, &sel.labels, th.thresholds)?;

    let mut m = new_manifest("evaluate", &cfg)?;
    m.add_input("scores", &a.selection.scores)?;
    m.add_input("claims", &a.selection.claims)?;
    m.add_input("thresholds", &a.thresholds)?;
    let mut outputs: Vec<(&str, PathBuf)> = Vec::new();

    if cfg.evaluate.stratify_length {
        let Some(pp) = &a.prompts else {
            bail!("--stratify-length needs --prompts for response lengths");
        };
        let prompts = load_prompts(pp)?;
        m.add_input("prompts", pp)?;
        let gw = cfg.gateway()?;
        let mut unit = format!("tokens:{}", gw.backend_name());
        let mut items = Vec::with_capacity(sel.claims.len());
        for ((c, s), l) in sel.claims.iter().zip(&sel.scores).zip(&sel.labels) {
            let r = prompts
                .get(&c.prompt_id)
                .ok_or_else(|| anyhow!("prompt {:?} missing from {}", c.prompt_id, pp.display()))?;
            let len = match gw.count_tokens(&r.response) {
                Some(n) => n,
                None => {
                    unit = "words:whitespace".into();
                    r.response.split_whitespace().count()
                }
            };
            items.push(StratumItem { score: *s, label: *l, response_length: len });
        }
        let bounds = LengthBounds { low: cfg.evaluate.length_low, high: cfg.evaluate.length_high };
        report.strata = Some(stratify_by_length(&items, th.thresholds, bounds)?);
        report.length_unit = Some(unit);
    }
    if cfg.evaluate.histogram {
        let h = score_histogram(&sel.scores, &sel.labels, cfg.evaluate.histogram_bins)?;
        let hp = out_file(&cfg, "histogram.csv")?;
        write_histogram_csv(&h, &hp)?;
        report.histogram = Some(h);
        outputs.push(("histogram", hp));
    }
    let csv_path = out_file(&cfg, "report.csv")?;
    write_report_csv(&report, &csv_path)?;
    outputs.push(("report_csv", csv_path));
    let file = ReportFile {
        score_id: a.selection.score_id.clone(),
        subset,
        unavailable: sel.unavailable,
        report,
    };
    let json_path = out_file(&cfg, "report.json")?;
    write_json(&json_path, &file)?;
    outputs.push(("report", json_path));
    m.set("score_id", &file.score_id)?;
    m.set("n", file.report.total())?;
    m.set("bacc", file.report.bacc)?;
    m.set("bacc_unknown", file.report.bacc_unknown)?;
    let refs: Vec<(&str, &Path)> = outputs.iter().map(|(n, p)| (*n, p.as_path())).collect();
    finish(m, &cfg, &refs)?;

    let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.4}"));
    say!(
        "n = {}, BAcc {}, BAcc-unknown {}, unknown {}",
        file.report.total(),
        fmt(file.report.bacc),
        fmt(file.report.bacc_unknown),
        file.report.n_unknown
    );
    Ok(())
}

pub fn report(cfg: RunConfig, a: ReportArgs) -> Result<()> {
    let path = out_file(&cfg, "summary.csv")?;
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "report", "score_id", "subset", "scope", "n", "tp", "fn", "tn", "fp", "n_unknown", "bacc",
        "bacc_unknown",
    ])?;
    let mut m = new_manifest("report", &cfg)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (i, p) in a.reports.iter().enumerate() {
        let r: ReportFile = read_json(p, "report")?;
        m.add_input(&format!("report{i}"), p)?;
        let subset = serde_json::to_value(r.subset)?.as_str().unwrap_or_default().to_string();
        let mut scopes = vec![("overall".to_string(), &r.report)];
        for (k, sub) in r.report.strata.iter().flatten() {
            scopes.push((format!("length:{k}"), sub));
        }
        for (scope, e) in scopes {
            w.write_record([
                p.display().to_string(),
                r.score_id.clone(),
                subset.clone(),
                scope,
                e.total().to_string(),
                e.tp.to_string(),
                e.fn_.to_string(),
                e.tn.to_string(),
                e.fp.to_string(),
                e.n_unknown.to_string(),
                opt(e.bacc),
                opt(e.bacc_unknown),
            ])?;
        }
    }
    w.flush()?;
    finish(m, &cfg, &[("summary", &path)])?;
    say!("wrote {}", path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use claimcheck::probe::TrainConfig;

    #[test]
    fn subset_all_keeps_everything() {
        let claims: Vec<Claim> = (0..5).map(|i| Claim::new(format!("c{i}"), "p", "x")).collect();
        let split = DatasetSplit { train: vec!["c0".into()], validation: vec!["c1".into()], test: vec![], seed: 0 };
        assert_eq!(subset_of(&claims, &split, Subset::All).len(), 5);
        assert_eq!(subset_of(&claims, &split, Subset::Validation)[0].id, "c1");
        assert!(subset_of(&claims, &split, Subset::Test).is_empty());
    }

    #[test]
    fn training_defaults_follow_config() {
        assert_eq!(RunConfig::default().probe.train, TrainConfig::default());
    }
}
