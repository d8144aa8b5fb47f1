//! Benchmark construction front end: decompose a response into atomized
//! claims, keep the ones relevant to the prompt, anchor each to the response
//! text and attach gold labels.

use std::collections::HashMap;
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gateway::{collect_all, Gateway, GenerationRequest};
use crate::jsonl;
use crate::model::{Claim, Label, PromptRecord};

pub const DEFAULT_DECOMPOSE_TEMPLATE: &str = "\
Break the response below into atomic facts. Each fact must be a single, \
self-contained statement that can be checked on its own; resolve pronouns to \
the entities they refer to. Write one fact per line with no numbering and no \
other text.

Question: {prompt}
Response: {response}

Facts:";

pub const DEFAULT_RELEVANCE_TEMPLATE: &str = "\
Does the following statement help answer the question? Reply with Yes or No only.

Question: {prompt}
Statement: {claim}

Answer:";

pub const DEFAULT_EXTRACTION_TEMPLATE: &str = "\
Below is a response and one fact that was extracted from it. Copy, word for \
word, the shortest contiguous passage of the response that states this fact. \
Output only the copied passage.

Response: {response}
Fact: {claim}

Passage:";

/// Overlaps shorter than this are not trusted as span anchors.
pub const MIN_SPAN_OVERLAP: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub decompose_template: String,
    pub relevance_template: String,
    pub extraction_template: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            decompose_template: DEFAULT_DECOMPOSE_TEMPLATE.into(),
            relevance_template: DEFAULT_RELEVANCE_TEMPLATE.into(),
            extraction_template: DEFAULT_EXTRACTION_TEMPLATE.into(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("decompose_template", &self.decompose_template, &["{prompt}", "{response}"][..]),
            ("relevance_template", &self.relevance_template, &["{prompt}", "{claim}"][..]),
            ("extraction_template", &self.extraction_template, &["{response}", "{claim}"][..]),
        ];
        for (name, template, needed) in checks {
            for p in needed {
                if !template.contains(p) {
                    return Err(Error::InvalidInput(format!("{name} lacks placeholder {p}")));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn render(template: &str, vars: &[(&str, &str)]) -> String {
    vars.iter().fold(template.to_string(), |acc, (k, v)| {
        acc.replace(&format!("{{{k}}}"), v)
    })
}

/// Deterministic claim id from the prompt id and the claim's position.
pub fn claim_id(prompt_id: &str, index: usize) -> String {
    let digest = Sha256::new()
        .chain_update(prompt_id.as_bytes())
        .chain_update([0u8])
        .chain_update(index.to_le_bytes())
        .finalize();
    hex::encode(&digest[..8])
}

fn bullet_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(?:[-*\u{2022}]|\d+[.)])\s+").unwrap())
}

/// Claim texts from a line-per-claim reply. `None` when the reply has content
/// but no line carries a statement.
pub fn parse_claim_lines(reply: &str) -> Option<Vec<String>> {
    let lines: Vec<String> = reply
        .lines()
        .map(|l| bullet_re().replace(l, "").trim().to_string())
        .filter(|l| l.chars().any(char::is_alphanumeric))
        .collect();
    if lines.is_empty() && reply.chars().any(|c| !c.is_whitespace()) {
        None
    } else {
        Some(lines)
    }
}

/// Yes/no judgment from a free-text reply; `None` when ambiguous.
pub fn parse_yes_no(reply: &str) -> Option<bool> {
    let first: String = reply
        .split_whitespace()
        .next()?
        .chars()
        .filter(|c| c.is_alphabetic())
        .collect::<String>()
        .to_lowercase();
    match first.as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanStatus {
    /// The model's passage occurs verbatim in the response.
    Exact,
    /// Only a long enough common substring could be anchored.
    Overlap,
    /// Nothing could be anchored; the span is left empty.
    Unverified,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpanExtraction {
    pub claim: Claim,
    pub status: SpanStatus,
}

impl SpanExtraction {
    pub fn flagged(&self) -> bool {
        self.status != SpanStatus::Exact
    }
}

/// Longest common contiguous substring, compared by chars.
pub fn longest_common_substring<'a>(a: &str, b: &'a str) -> &'a str {
    let ac: Vec<char> = a.chars().collect();
    let bc: Vec<(usize, char)> = b.char_indices().collect();
    if ac.is_empty() || bc.is_empty() {
        return "";
    }
    let mut prev = vec![0usize; bc.len() + 1];
    let mut cur = vec![0usize; bc.len() + 1];
    let (mut best_len, mut best_end) = (0, 0);
    for &ca in &ac {
        for (j, &(_, cb)) in bc.iter().enumerate() {
            cur[j + 1] = if ca == cb { prev[j] + 1 } else { 0 };
            if cur[j + 1] > best_len {
                best_len = cur[j + 1];
                best_end = j + 1;
            }
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    if best_len == 0 {
        return "";
    }
    let start = bc[best_end - best_len].0;
    let end = bc.get(best_end).map_or(b.len(), |(i, _)| *i);
    &b[start..end]
}

/// Anchors a proposed passage in the response.
pub fn anchor_span(response: &str, proposal: &str) -> (Option<String>, SpanStatus) {
    let proposal = proposal.trim().trim_matches('"').trim();
    if !proposal.is_empty() && response.contains(proposal) {
        return (Some(proposal.to_string()), SpanStatus::Exact);
    }
    let overlap = longest_common_substring(proposal, response);
    if overlap.chars().count() >= MIN_SPAN_OVERLAP {
        (Some(overlap.to_string()), SpanStatus::Overlap)
    } else {
        (None, SpanStatus::Unverified)
    }
}

#[derive(Debug, Clone)]
pub struct ClaimPipeline {
    gateway: Gateway,
    config: PipelineConfig,
}

impl ClaimPipeline {
    pub fn new(gateway: Gateway, config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        Ok(ClaimPipeline { gateway, config })
    }

    fn ask(&self, prompt: String) -> Result<String> {
        Ok(self.gateway.generate(&GenerationRequest::user(prompt))?.text)
    }

    pub fn decompose(&self, prompt_id: &str, prompt: &str, response: &str) -> Result<Vec<Claim>> {
        if response.trim().is_empty() {
            return Err(Error::InvalidInput(format!("empty response for prompt {prompt_id}")));
        }
        let reply = self.ask(render(
            &self.config.decompose_template,
            &[("prompt", prompt), ("response", response)],
        ))?;
        let lines = parse_claim_lines(&reply).ok_or(Error::Decomposition { raw: reply })?;
        Ok(lines
            .into_iter()
            .enumerate()
            .map(|(i, text)| Claim::new(claim_id(prompt_id, i), prompt_id, text))
            .collect())
    }

    /// Sets `relevant` from a yes/no judgment and returns the relevant claims.
    /// Ambiguous judgments keep the claim.
    pub fn filter_relevant(&self, prompt: &str, claims: Vec<Claim>) -> Result<Vec<Claim>> {
        let judged = self.gateway.map_concurrent(&claims, |_, c| {
            let reply = self.ask(render(
                &self.config.relevance_template,
                &[("prompt", prompt), ("claim", &c.text)],
            ))?;
            Ok(match parse_yes_no(&reply) {
                Some(v) => v,
                None => {
                    log::warn!("ambiguous relevance reply {reply:?} for claim {}; keeping it", c.id);
                    true
                }
            })
        });
        let judged = collect_all(judged)?;
        Ok(claims
            .into_iter()
            .zip(judged)
            .filter_map(|(mut c, relevant)| {
                c.relevant = relevant;
                relevant.then_some(c)
            })
            .collect())
    }

    pub fn extract_original_span(&self, response: &str, claim: &Claim) -> Result<SpanExtraction> {
        let proposal = self.ask(render(
            &self.config.extraction_template,
            &[("response", response), ("claim", &claim.text)],
        ))?;
        let (span, status) = anchor_span(response, &proposal);
        if status != SpanStatus::Exact {
            log::warn!("claim {}: span {:?}", claim.id, status);
        }
        let mut claim = claim.clone();
        claim.original_span = span;
        Ok(SpanExtraction { claim, status })
    }

    /// decompose → filter_relevant → extract_original_span for one record.
    pub fn process(&self, record: &PromptRecord) -> Result<Vec<SpanExtraction>> {
        let claims = self.decompose(&record.prompt_id, &record.prompt, &record.response)?;
        let relevant = self.filter_relevant(&record.prompt, claims)?;
        let spans = self
            .gateway
            .map_concurrent(&relevant, |_, c| self.extract_original_span(&record.response, c));
        collect_all(spans)
    }
}

/// Source of gold labels.
pub trait Labeler: Send + Sync {
    fn name(&self) -> &str;
    fn label(&self, claim: &Claim) -> Result<Label>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub claim_text: String,
    pub label: Label,
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Joins against a pre-labeled JSON Lines file by whitespace-normalized text.
#[derive(Debug, Clone, Default)]
pub struct FileLabeler {
    labels: HashMap<String, Label>,
}

impl FileLabeler {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_records(jsonl::read::<LabelRecord>(path)?))
    }

    pub fn from_records(records: impl IntoIterator<Item = LabelRecord>) -> Self {
        FileLabeler {
            labels: records
                .into_iter()
                .map(|r| (normalize_ws(&r.claim_text), r.label))
                .collect(),
        }
    }
}

impl Labeler for FileLabeler {
    fn name(&self) -> &str {
        "file"
    }

    fn label(&self, claim: &Claim) -> Result<Label> {
        Ok(self
            .labels
            .get(&normalize_ws(&claim.text))
            .copied()
            .unwrap_or(Label::Unlabeled))
    }
}

/// Placeholder for search-engine verification; it has no backend and always
/// reports the capability as missing.
#[derive(Debug, Clone, Default)]
pub struct SearchLabeler;

impl Labeler for SearchLabeler {
    fn name(&self) -> &str {
        "search"
    }

    fn label(&self, _claim: &Claim) -> Result<Label> {
        Err(Error::Capability {
            backend: "search".into(),
            capability: "search-based labeling".into(),
            hint: "use a pre-labeled file".into(),
        })
    }
}

pub fn label_claims(claims: Vec<Claim>, labeler: &dyn Labeler) -> Result<Vec<Claim>> {
    claims
        .into_iter()
        .map(|mut c| {
            c.label = labeler.label(&c)?;
            Ok(c)
        })
        .collect()
}

/// Downsamples the majority class so both labels have equal counts; unlabeled
/// claims are dropped. Input order is preserved.
pub fn balance_labels(claims: &[Claim], seed: u64) -> Vec<Claim> {
    let idx_of = |l: Label| -> Vec<usize> {
        claims.iter().enumerate().filter(|(_, c)| c.label == l).map(|(i, _)| i).collect()
    };
    let (mut f, mut h) = (idx_of(Label::Factual), idx_of(Label::Hallucinated));
    let n = f.len().min(h.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    f.shuffle(&mut rng);
    h.shuffle(&mut rng);
    let mut keep: Vec<usize> = f[..n].iter().chain(&h[..n]).copied().collect();
    keep.sort_unstable();
    keep.into_iter().map(|i| claims[i].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{GatewayOptions, MockBackend, MockRule, MockSettings};

    fn pipeline(rules: Vec<MockRule>) -> ClaimPipeline {
        let gw = Gateway::new(MockBackend::new(rules, MockSettings::default()), GatewayOptions::default());
        ClaimPipeline::new(gw, PipelineConfig::default()).unwrap()
    }

    #[test]
    fn two_lines_two_claims_in_order() {
        let p = pipeline(vec![MockRule::reply("atomic facts", "Paris is in France.\nParis has 2 million people.")]);
        let c = p.decompose("p1", "Tell me about Paris", "Paris is in France...").unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].text, "Paris is in France.");
        assert_eq!(c[1].text, "Paris has 2 million people.");
        assert_eq!(c[0].id, claim_id("p1", 0));
        assert_ne!(c[0].id, c[1].id);
    }

    #[test]
    fn empty_reply_gives_no_claims() {
        let p = pipeline(vec![MockRule::reply("atomic facts", "")]);
        assert!(p.decompose("p", "q", "r").unwrap().is_empty());
    }

    #[test]
    fn blank_lines_dropped_order_kept() {
        let p = pipeline(vec![MockRule::reply("atomic facts", "- A is B.\n\n  \n2. C is D.\n\nE is F.")]);
        let texts: Vec<String> = p.decompose("p", "q", "r").unwrap().into_iter().map(|c| c.text).collect();
        assert_eq!(texts, ["A is B.", "C is D.", "E is F."]);
    }

    #[test]
    fn junk_reply_is_decomposition_error() {
        let p = pipeline(vec![MockRule::reply("atomic facts", "---\n***")]);
        assert!(matches!(p.decompose("p", "q", "r").unwrap_err(), Error::Decomposition { .. }));
    }

    #[test]
    fn relevance_yes_no_yes() {
        let p = pipeline(vec![
            MockRule::reply("Statement: one", "Yes"),
            MockRule::reply("Statement: two", "No."),
            MockRule::reply("Statement: three", "yes, it does"),
        ]);
        let claims = vec![Claim::new("1", "p", "one"), Claim::new("2", "p", "two"), Claim::new("3", "p", "three")];
        let kept = p.filter_relevant("q", claims).unwrap();
        let ids: Vec<&str> = kept.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids, ["1", "3"]);
        assert!(kept.iter().all(|c| c.relevant));
    }

    #[test]
    fn relevance_zero_claims() {
        assert!(pipeline(vec![]).filter_relevant("q", vec![]).unwrap().is_empty());
    }

    #[test]
    fn ambiguous_relevance_keeps_claim() {
        let p = pipeline(vec![MockRule::reply("Statement:", "maybe")]);
        let kept = p.filter_relevant("q", vec![Claim::new("1", "p", "x")]).unwrap();
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn span_identity_case() {
        let response = "Einstein was born in Ulm in 1879. He moved to Munich.";
        let p = pipeline(vec![MockRule::reply("Passage:", "Einstein was born in Ulm in 1879.")]);
        let s = p
            .extract_original_span(response, &Claim::new("1", "p", "Einstein was born in Ulm in 1879."))
            .unwrap();
        assert_eq!(s.claim.original_span.as_deref(), Some("Einstein was born in Ulm in 1879."));
        assert!(!s.flagged());
    }

    #[test]
    fn span_overlap_fallback() {
        let response = "The tower is 330 metres tall and was built in 1889.";
        // proposal shares exactly "330 metres t" (12 chars) with the response
        let (span, status) = anchor_span(response, "xx330 metres tyy");
        assert_eq!(span.as_deref(), Some("330 metres t"));
        assert_eq!(status, SpanStatus::Overlap);
    }

    #[test]
    fn span_no_overlap_flagged_empty() {
        let (span, status) = anchor_span("The tower is tall.", "completely different words");
        assert_eq!(span, None);
        assert_eq!(status, SpanStatus::Unverified);
    }

    #[test]
    fn lcs_handles_multibyte() {
        assert_eq!(longest_common_substring("zürich ab", "in zürich"), "zürich");
    }

    #[test]
    fn file_labeler_join() {
        let l = FileLabeler::from_records([LabelRecord {
            claim_text: "Paris  is in\nFrance.".into(),
            label: Label::Factual,
        }]);
        let c = label_claims(
            vec![Claim::new("1", "p", "Paris is in France."), Claim::new("2", "p", "Rome is in Spain.")],
            &l,
        )
        .unwrap();
        assert_eq!(c[0].label, Label::Factual);
        assert_eq!(c[1].label, Label::Unlabeled);
    }

    #[test]
    fn unreadable_label_file_errors() {
        assert!(FileLabeler::load("/nonexistent/labels.jsonl").is_err());
    }

    #[test]
    fn balanced_set_of_446() {
        let mut records = Vec::new();
        let mut claims = Vec::new();
        for i in 0..446 {
            let label = if i % 2 == 0 { Label::Factual } else { Label::Hallucinated };
            let text = format!("claim number {i}");
            records.push(LabelRecord { claim_text: text.clone(), label });
            claims.push(Claim::new(i.to_string(), "p", text));
        }
        let labeled = label_claims(claims, &FileLabeler::from_records(records)).unwrap();
        let balanced = balance_labels(&labeled, 0);
        assert_eq!(balanced.len(), 446);
        assert_eq!(balanced.iter().filter(|c| c.label == Label::Factual).count(), 223);
    }

    #[test]
    fn balancing_downsamples_majority() {
        let claims: Vec<Claim> = (0..2617)
            .map(|i| {
                let l = if i < 2394 { Label::Factual } else { Label::Hallucinated };
                Claim::new(i.to_string(), "p", "t").with_label(l)
            })
            .collect();
        let b = balance_labels(&claims, 1);
        assert_eq!(b.len(), 446);
        assert_eq!(b.iter().filter(|c| c.label == Label::Hallucinated).count(), 223);
    }

    #[test]
    fn search_labeler_is_stub() {
        assert!(SearchLabeler.label(&Claim::new("1", "p", "x")).is_err());
    }
}
