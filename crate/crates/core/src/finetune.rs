//! Builds instruction-tuning datasets for a detector model: label-rationale
//! detection examples, auxiliary question-answer examples and optional
//! paraphrase augmentation.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::claims::render;
use crate::detectors::{DEFAULT_TF_TEMPLATE, DETECTION_INSTRUCTION};
use crate::error::{Error, Result};
use crate::gateway::{collect_all, Gateway, GenerationRequest};
use crate::manifest::{sha256_hex, TOOL_VERSION};
use crate::model::{Claim, FineTuneExample, Label, Task};

pub const MAX_RATIONALE_WORDS: usize = 150;
pub const TRUNCATION_MARKER: &str = "[truncated]";
pub const QA_INSTRUCTION: &str = "Answer the following question and briefly explain your answer.";

/// Input half of the detection prompt; `instruction + "\n\n" + input` is the
/// exact True/False detector prompt.
const DETECTION_INPUT: &str = "Claim: {claim}\nAnswer:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildOptions {
    pub include_rationales: bool,
    pub include_aux_qa: bool,
    pub include_paraphrase: bool,
    pub half_data: bool,
    pub seed: u64,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            include_rationales: true,
            include_aux_qa: true,
            include_paraphrase: false,
            half_data: false,
            seed: 0,
        }
    }
}

impl BuildOptions {
    /// Examples emitted per retained claim.
    pub fn examples_per_claim(&self) -> usize {
        1 + usize::from(self.include_aux_qa) + usize::from(self.include_paraphrase)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuilderPrompts {
    /// Placeholders: {claim}, {verdict}, {evidence}.
    pub rationale: String,
    /// Evidence block inserted at {evidence} when evidence is available.
    pub evidence_block: String,
    /// Placeholder: {claim}.
    pub question: String,
    /// Placeholders: {claim}, {question}.
    pub extract_answer: String,
    /// Placeholders: {claim}, {rationale}, {question}.
    pub correct_answer: String,
    /// Placeholder: {claim}.
    pub paraphrase: String,
}

impl Default for BuilderPrompts {
    fn default() -> Self {
        BuilderPrompts {
            rationale: "\
A fact-checker has determined that the following claim is {verdict}.{evidence}

Claim: {claim}

In one short paragraph, explain why the claim is {verdict}."
                .into(),
            evidence_block: "\n\nSearch results:\n\"\"\"\n{evidence}\n\"\"\"".into(),
            question: "\
Write one question that asks about the key information in the following claim. \
Reply with the question only.

Claim: {claim}
Question:"
                .into(),
            extract_answer: "\
Answer the question using the claim below. Quote the answer from the claim, then \
briefly explain.

Claim: {claim}
Question: {question}
Answer:"
                .into(),
            correct_answer: "\
The claim below is incorrect. Using the explanation, give the correct answer to the \
question, then briefly explain.

Claim: {claim}
Explanation: {rationale}
Question: {question}
Answer:"
                .into(),
            paraphrase: "\
Paraphrase the following claim without changing its meaning. Reply with the \
paraphrase only.

Claim: {claim}
Paraphrase:"
                .into(),
        }
    }
}

fn label_word(claim: &Claim) -> Result<&'static str> {
    match claim.label {
        Label::Factual => Ok("True"),
        Label::Hallucinated => Ok("False"),
        Label::Unlabeled => Err(Error::InvalidInput(format!("claim {} is unlabeled", claim.id))),
    }
}

/// Collapses all whitespace runs (including newlines) to single spaces.
fn one_paragraph(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Caps a rationale at [`MAX_RATIONALE_WORDS`] words, appending the marker when cut.
pub fn clamp_rationale(text: &str) -> String {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.len() <= MAX_RATIONALE_WORDS {
        words.join(" ")
    } else {
        format!("{} {TRUNCATION_MARKER}", words[..MAX_RATIONALE_WORDS].join(" "))
    }
}

/// True when `output` begins with exactly the token `True` or `False`,
/// followed by nothing or by the ". " separator.
pub fn has_label_first_token(output: &str) -> bool {
    ["True", "False"].iter().any(|l| {
        output
            .strip_prefix(l)
            .is_some_and(|rest| rest.is_empty() || rest.starts_with(". "))
    })
}

/// Detection record in label-rationale format.
pub fn build_detection_example(
    claim: &Claim,
    rationale: Option<&str>,
    opts: &BuildOptions,
) -> Result<FineTuneExample> {
    let label = label_word(claim)?;
    let output = match rationale.map(one_paragraph).filter(|r| !r.is_empty()) {
        Some(r) if opts.include_rationales => format!("{label}. {r}"),
        _ => label.to_string(),
    };
    if !has_label_first_token(&output) {
        return Err(Error::InvalidInput(format!(
            "detection output for claim {} does not start with a bare label",
            claim.id
        )));
    }
    Ok(FineTuneExample {
        instruction: DETECTION_INSTRUCTION.into(),
        input: render(DETECTION_INPUT, &[("claim", &claim.text)]),
        output,
        task: Task::Detect,
        source_claim_id: claim.id.clone(),
    })
}

fn normalize_for_compare(s: &str) -> String {
    one_paragraph(s)
        .trim_end_matches(['.', '!', '?'])
        .to_lowercase()
}

/// Per-claim evidence text, keyed by claim id.
pub type EvidenceMap = BTreeMap<String, String>;

#[derive(Debug, Clone)]
pub struct DatasetBuilder {
    gateway: Gateway,
    prompts: BuilderPrompts,
    evidence: EvidenceMap,
}

impl DatasetBuilder {
    pub fn new(gateway: Gateway) -> Self {
        DatasetBuilder {
            gateway,
            prompts: BuilderPrompts::default(),
            evidence: EvidenceMap::new(),
        }
    }

    pub fn with_prompts(mut self, prompts: BuilderPrompts) -> Self {
        self.prompts = prompts;
        self
    }

    pub fn with_evidence(mut self, evidence: EvidenceMap) -> Self {
        self.evidence = evidence;
        self
    }

    fn ask(&self, prompt: String) -> Result<String> {
        Ok(self.gateway.generate(&GenerationRequest::user(prompt))?.text.trim().to_string())
    }

    /// Model-written explanation of the claim's label, one paragraph of at most
    /// [`MAX_RATIONALE_WORDS`] words. An empty reply is retried once.
    pub fn generate_rationale(&self, claim: &Claim, evidence: Option<&str>) -> Result<String> {
        let verdict = match claim.label {
            Label::Factual => "true",
            Label::Hallucinated => "false",
            Label::Unlabeled => "true or false",
        };
        let evidence = evidence
            .map(|e| render(&self.prompts.evidence_block, &[("evidence", e)]))
            .unwrap_or_default();
        let prompt = render(
            &self.prompts.rationale,
            &[("evidence", &evidence), ("verdict", verdict), ("claim", &claim.text)],
        );
        for attempt in 0..2 {
            let reply = self.ask(prompt.clone())?;
            if !reply.is_empty() {
                return Ok(clamp_rationale(&reply));
            }
            log::warn!("claim {}: empty rationale (attempt {})", claim.id, attempt + 1);
        }
        Err(Error::Generation(format!("empty rationale for claim {} after retry", claim.id)))
    }

    /// Auxiliary question-answer record. Factual claims answer from the claim
    /// text; hallucinated claims answer with a correction guided by `rationale`.
    pub fn build_qa_example(&self, claim: &Claim, rationale: Option<&str>) -> Result<FineTuneExample> {
        label_word(claim)?;
        let question = self
            .ask(render(&self.prompts.question, &[("claim", &claim.text)]))?
            .lines()
            .map(str::trim)
            .find(|l| !l.is_empty())
            .map(str::to_string)
            .ok_or_else(|| Error::Generation(format!("no question generated for claim {}", claim.id)))?;
        let prompt = match claim.label {
            Label::Factual => render(
                &self.prompts.extract_answer,
                &[("claim", &claim.text), ("question", &question)],
            ),
            _ => {
                let r = rationale.filter(|r| !r.trim().is_empty()).ok_or_else(|| {
                    Error::InvalidInput(format!(
                        "hallucinated claim {} needs a rationale for its QA example",
                        claim.id
                    ))
                })?;
                render(
                    &self.prompts.correct_answer,
                    &[("claim", &claim.text), ("rationale", r), ("question", &question)],
                )
            }
        };
        let answer = one_paragraph(&self.ask(prompt)?);
        if answer.is_empty() {
            return Err(Error::Generation(format!("no answer generated for claim {}", claim.id)));
        }
        Ok(FineTuneExample {
            instruction: QA_INSTRUCTION.into(),
            input: question,
            output: answer,
            task: Task::Qa,
            source_claim_id: claim.id.clone(),
        })
    }

    /// Paraphrase of the claim text; a paraphrase identical to the original is
    /// retried once and then kept with a warning.
    pub fn paraphrase(&self, claim: &Claim) -> Result<String> {
        let prompt = render(&self.prompts.paraphrase, &[("claim", &claim.text)]);
        let mut reply = String::new();
        for _ in 0..2 {
            reply = one_paragraph(&self.ask(prompt.clone())?);
            if reply.is_empty() {
                return Err(Error::Generation(format!("empty paraphrase for claim {}", claim.id)));
            }
            if normalize_for_compare(&reply) != normalize_for_compare(&claim.text) {
                return Ok(reply);
            }
        }
        log::warn!("claim {}: paraphrase equals the original; keeping it", claim.id);
        Ok(reply)
    }

    pub fn build_paraphrase_example(
        &self,
        claim: &Claim,
        rationale: Option<&str>,
        opts: &BuildOptions,
    ) -> Result<FineTuneExample> {
        label_word(claim)?;
        let mut para = claim.clone();
        para.text = self.paraphrase(claim)?;
        build_detection_example(&para, rationale, opts)
    }

    fn build_for_claim(&self, claim: &Claim, opts: &BuildOptions) -> Result<Vec<FineTuneExample>> {
        let needs_rationale = opts.include_rationales
            || (opts.include_aux_qa && claim.label == Label::Hallucinated);
        let rationale = if needs_rationale {
            Some(self.generate_rationale(claim, self.evidence.get(&claim.id).map(String::as_str))?)
        } else {
            None
        };
        let r = rationale.as_deref();
        let mut out = vec![build_detection_example(claim, r, opts)?];
        if opts.include_aux_qa {
            out.push(self.build_qa_example(claim, r)?);
        }
        if opts.include_paraphrase {
            out.push(self.build_paraphrase_example(claim, r, opts)?);
        }
        Ok(out)
    }

    /// All examples in claim order; per claim: detection, then QA, then paraphrase.
    pub fn build_dataset(&self, claims: &[Claim], opts: &BuildOptions) -> Result<Vec<FineTuneExample>> {
        if let Some(c) = claims.iter().find(|c| !c.label.is_labeled()) {
            return Err(Error::InvalidInput(format!("claim {} is unlabeled", c.id)));
        }
        let selected = if opts.half_data {
            half_subsample(claims, opts.seed)
        } else {
            claims.to_vec()
        };
        let per_claim = self
            .gateway
            .map_concurrent(&selected, |_, c| self.build_for_claim(c, opts));
        Ok(collect_all(per_claim)?.into_iter().flatten().collect())
    }
}

/// Seeded label-stratified half: ceil(n/2) claims of each label, in input order.
pub fn half_subsample(claims: &[Claim], seed: u64) -> Vec<Claim> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for label in [Label::Factual, Label::Hallucinated] {
        let mut idx: Vec<usize> = (0..claims.len()).filter(|&i| claims[i].label == label).collect();
        let k = idx.len().div_ceil(2);
        idx.shuffle(&mut rng);
        keep.extend_from_slice(&idx[..k]);
    }
    keep.sort_unstable();
    keep.into_iter().map(|i| claims[i].clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub tool_version: String,
    pub options: BuildOptions,
    pub seed: u64,
    pub n_claims_in: usize,
    pub n_claims_used: usize,
    pub used_claim_ids: Vec<String>,
    pub counts: BTreeMap<String, usize>,
    /// sha256 of the dataset file bytes.
    pub content_hash: String,
    pub ordering: String,
}

/// Writes the dataset as JSON Lines plus a `<path>.manifest.json` sidecar.
pub fn write_dataset(
    path: impl AsRef<Path>,
    examples: &[FineTuneExample],
    opts: &BuildOptions,
    n_claims_in: usize,
) -> Result<DatasetManifest> {
    let bytes = crate::jsonl::to_bytes(examples)?;
    std::fs::write(path.as_ref(), &bytes).map_err(|e| Error::io(path.as_ref(), e))?;
    let mut used: Vec<String> = Vec::new();
    for e in examples {
        if used.last() != Some(&e.source_claim_id) {
            used.push(e.source_claim_id.clone());
        }
    }
    let count = |t: Task| examples.iter().filter(|e| e.task == t).count();
    let manifest = DatasetManifest {
        tool_version: TOOL_VERSION.into(),
        options: opts.clone(),
        seed: opts.seed,
        n_claims_in,
        n_claims_used: used.len(),
        used_claim_ids: used,
        counts: BTreeMap::from([
            ("detect".into(), count(Task::Detect)),
            ("qa".into(), count(Task::Qa)),
            ("total".into(), examples.len()),
        ]),
        content_hash: sha256_hex(&bytes),
        ordering: "unshuffled; per claim: detect, qa, paraphrase; shuffle in the trainer".into(),
    };
    let mut side = path.as_ref().as_os_str().to_owned();
    side.push(".manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(&side, text).map_err(|e| Error::io(&side, e))?;
    Ok(manifest)
}

/// The detector prompt a fine-tuned model sees for `claim_text`, as assembled
/// from a detection example's instruction and input.
pub fn detection_prompt(claim_text: &str) -> String {
    render(DEFAULT_TF_TEMPLATE, &[("claim", claim_text)])
}
