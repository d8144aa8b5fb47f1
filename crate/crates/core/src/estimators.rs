//! Token-level confidence estimators over a claim's forced-decoding scores.
//!
//! Every score is oriented so that higher means more likely factual:
//! probability reductions are reported as-is, entropy reductions negated.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{Gateway, GenerationRequest};
use crate::model::{Claim, PromptRecord, TokenScore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Probability,
    Entropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    AllTokens,
    EntityTokens,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Arithmetic,
    Geometric,
    /// Mean of the `k` least confident tokens.
    TopK(usize),
    /// Mean of the least confident `p` percent, at least one token.
    TopPercent(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregatorSpec {
    pub statistic: Statistic,
    pub scope: Scope,
    pub reduction: Reduction,
}

impl AggregatorSpec {
    pub fn new(statistic: Statistic, scope: Scope, reduction: Reduction) -> Self {
        AggregatorSpec {
            statistic,
            scope,
            reduction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.reduction {
            Reduction::TopK(0) => Err(Error::InvalidInput("top_k needs k >= 1".into())),
            Reduction::TopPercent(p) if !(p > 0.0 && p <= 100.0) => {
                Err(Error::InvalidInput(format!("top_percent needs p in (0,100], got {p}")))
            }
            _ => Ok(()),
        }
    }

    /// The fixed 32-member grid: statistic × scope × eight reductions.
    pub fn panel() -> Vec<AggregatorSpec> {
        let reductions = [
            Reduction::Arithmetic,
            Reduction::Geometric,
            Reduction::TopK(1),
            Reduction::TopK(3),
            Reduction::TopK(5),
            Reduction::TopPercent(5.0),
            Reduction::TopPercent(10.0),
            Reduction::TopPercent(15.0),
        ];
        let mut out = Vec::with_capacity(32);
        for statistic in [Statistic::Probability, Statistic::Entropy] {
            for scope in [Scope::AllTokens, Scope::EntityTokens] {
                for reduction in reductions {
                    out.push(AggregatorSpec::new(statistic, scope, reduction));
                }
            }
        }
        out
    }
}

impl fmt::Display for AggregatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let stat = match self.statistic {
            Statistic::Probability => "probability",
            Statistic::Entropy => "entropy",
        };
        let scope = match self.scope {
            Scope::AllTokens => "all",
            Scope::EntityTokens => "entity",
        };
        write!(f, "{stat}/{scope}/")?;
        match self.reduction {
            Reduction::Arithmetic => f.write_str("arithmetic"),
            Reduction::Geometric => f.write_str("geometric"),
            Reduction::TopK(k) => write!(f, "top_k_{k}"),
            Reduction::TopPercent(p) => write!(f, "top_percent_{p}"),
        }
    }
}

impl FromStr for AggregatorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("unknown estimator spec {s:?}"));
        let mut parts = s.split('/');
        let statistic = match parts.next() {
            Some("probability") => Statistic::Probability,
            Some("entropy") => Statistic::Entropy,
            _ => return Err(bad()),
        };
        let scope = match parts.next() {
            Some("all") => Scope::AllTokens,
            Some("entity") => Scope::EntityTokens,
            _ => return Err(bad()),
        };
        let r = parts.next().ok_or_else(bad)?;
        let reduction = if r == "arithmetic" {
            Reduction::Arithmetic
        } else if r == "geometric" {
            Reduction::Geometric
        } else if let Some(k) = r.strip_prefix("top_k_") {
            Reduction::TopK(k.parse().map_err(|_| bad())?)
        } else if let Some(p) = r.strip_prefix("top_percent_") {
            Reduction::TopPercent(p.parse().map_err(|_| bad())?)
        } else {
            return Err(bad());
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        let spec = AggregatorSpec::new(statistic, scope, reduction);
        spec.validate()?;
        Ok(spec)
    }
}

/// Number of tokens a top-percent reduction averages over.
pub fn top_percent_count(p: f64, n: usize) -> usize {
    ((p * n as f64 / 100.0).ceil() as usize).clamp(1, n.max(1))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn geometric_mean(xs: &[f64]) -> f64 {
    if xs.iter().any(|x| *x <= 0.0) {
        return 0.0;
    }
    (xs.iter().map(|x| x.ln()).sum::<f64>() / xs.len() as f64).exp()
}

/// Reduces a claim's tokens to one score under `spec`.
pub fn aggregate(tokens: &[TokenScore], spec: &AggregatorSpec) -> Result<f64> {
    spec.validate()?;
    let scoped = tokens
        .iter()
        .filter(|t| spec.scope == Scope::AllTokens || t.is_entity);
    let mut values: Vec<f64> = match spec.statistic {
        Statistic::Probability => scoped.map(|t| t.probability).collect(),
        Statistic::Entropy => scoped.map(|t| t.entropy).collect(),
    };
    if values.is_empty() {
        return Err(Error::EstimatorUnavailable(format!("{spec}: no tokens in scope")));
    }
    // least confident first: lowest probability, highest entropy
    match spec.statistic {
        Statistic::Probability => values.sort_by(f64::total_cmp),
        Statistic::Entropy => values.sort_by(|a, b| b.total_cmp(a)),
    }
    let n = values.len();
    let reduced = match spec.reduction {
        Reduction::Arithmetic => mean(&values),
        Reduction::Geometric => geometric_mean(&values),
        Reduction::TopK(k) => mean(&values[..k.min(n)]),
        Reduction::TopPercent(p) => mean(&values[..top_percent_count(p, n)]),
    };
    let oriented = match spec.statistic {
        Statistic::Probability => reduced,
        Statistic::Entropy => -reduced,
    };
    if !oriented.is_finite() {
        return Err(Error::EstimatorUnavailable(format!("{spec}: non-finite score")));
    }
    Ok(oriented)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelEntry {
    pub spec: AggregatorSpec,
    /// `None` when the scope is empty (no entity tokens).
    pub score: Option<f64>,
}

pub fn run_estimator_panel(tokens: &[TokenScore]) -> Result<Vec<PanelEntry>> {
    if tokens.is_empty() {
        return Err(Error::InvalidInput("estimator panel needs at least one token".into()));
    }
    AggregatorSpec::panel()
        .into_iter()
        .map(|spec| match aggregate(tokens, &spec) {
            Ok(score) => Ok(PanelEntry {
                spec,
                score: Some(score),
            }),
            Err(Error::EstimatorUnavailable(_)) => Ok(PanelEntry { spec, score: None }),
            Err(e) => Err(e),
        })
        .collect()
}

/// Row of the panel JSON Lines output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelRecord {
    pub claim_id: String,
    pub spec: String,
    pub score: Option<f64>,
    pub available: bool,
}

impl PanelRecord {
    pub fn from_entry(claim_id: &str, e: &PanelEntry) -> Self {
        PanelRecord {
            claim_id: claim_id.to_string(),
            spec: e.spec.to_string(),
            score: e.score,
            available: e.score.is_some(),
        }
    }
}

pub const DEFAULT_ENTITY_TEMPLATE: &str = "\
List every named entity, number and date that appears in the statement below, \
copied exactly, one per line. Output nothing else.

Statement: {claim}

Entities:";

#[derive(Debug, Clone)]
pub enum EntityMarker {
    /// Ask the model for entity spans.
    Llm { gateway: Gateway, template: String },
    /// Capitalized multi-word spans, non-initial capitalized words, month
    /// names and anything containing a digit.
    Heuristic,
}

impl EntityMarker {
    pub fn llm(gateway: Gateway) -> Self {
        EntityMarker::Llm {
            gateway,
            template: DEFAULT_ENTITY_TEMPLATE.into(),
        }
    }

    fn entity_ranges(&self, claim_text: &str) -> Result<Vec<Range<usize>>> {
        match self {
            EntityMarker::Heuristic => Ok(heuristic_entity_ranges(claim_text)),
            EntityMarker::Llm { gateway, template } => {
                let prompt = crate::claims::render(template, &[("claim", claim_text)]);
                let reply = gateway.generate(&GenerationRequest::user(prompt))?.text;
                let mut ranges = Vec::new();
                for line in reply.lines() {
                    let entity = line.trim().trim_start_matches(['-', '*']).trim();
                    if entity.is_empty() {
                        continue;
                    }
                    ranges.extend(
                        claim_text
                            .match_indices(entity)
                            .map(|(i, m)| i..i + m.len()),
                    );
                }
                Ok(ranges)
            }
        }
    }
}

const MONTHS: [&str; 12] = [
    "January", "February", "March", "April", "May", "June", "July", "August", "September",
    "October", "November", "December",
];

// capitalized only because they open a sentence
const SENTENCE_OPENERS: [&str; 14] = [
    "The", "A", "An", "In", "On", "At", "He", "She", "It", "They", "This", "That", "His", "Her",
];

fn heuristic_entity_ranges(text: &str) -> Vec<Range<usize>> {
    static WORD: OnceLock<Regex> = OnceLock::new();
    let word = WORD.get_or_init(|| Regex::new(r"[\p{L}\p{N}][\p{L}\p{N}'\-]*").unwrap());
    let words: Vec<(Range<usize>, &str)> =
        word.find_iter(text).map(|m| (m.range(), m.as_str())).collect();
    let capitalized = |w: &str| w.chars().next().is_some_and(char::is_uppercase);
    let sentence_start = |start: usize| {
        text[..start]
            .trim_end()
            .chars()
            .last()
            .is_none_or(|c| matches!(c, '.' | '!' | '?'))
    };

    let mut ranges = Vec::new();
    let mut i = 0;
    while i < words.len() {
        let (r, w) = &words[i];
        if w.chars().any(|c| c.is_ascii_digit()) || MONTHS.contains(w) {
            ranges.push(r.clone());
            i += 1;
            continue;
        }
        if capitalized(w) {
            let mut j = i + 1;
            // a run continues across single spaces only
            while j < words.len()
                && capitalized(words[j].1)
                && text[words[j - 1].0.end..words[j].0.start] == *" "
            {
                j += 1;
            }
            let mut start = i;
            if sentence_start(r.start) && SENTENCE_OPENERS.contains(w) {
                start += 1;
            }
            if start < j && (j - start >= 2 || start > i || !sentence_start(r.start)) {
                ranges.push(words[start].0.start..words[j - 1].0.end);
            }
            i = j;
            continue;
        }
        i += 1;
    }
    ranges
}

/// Byte range of each token inside `text`, found by a left-to-right scan.
fn token_ranges(text: &str, tokens: &[TokenScore]) -> Vec<Option<Range<usize>>> {
    let mut cursor = 0;
    tokens
        .iter()
        .map(|t| {
            for needle in [t.token_text.as_str(), t.token_text.trim()] {
                if needle.is_empty() {
                    continue;
                }
                if let Some(pos) = text[cursor..].find(needle) {
                    let start = cursor + pos;
                    cursor = start + needle.len();
                    return Some(start..cursor);
                }
            }
            None
        })
        .collect()
}

/// Flags tokens that overlap an entity span of `claim_text`.
pub fn mark_entity_tokens(
    claim_text: &str,
    tokens: &[TokenScore],
    marker: &EntityMarker,
) -> Result<Vec<TokenScore>> {
    let entities = marker.entity_ranges(claim_text)?;
    let ranges = token_ranges(claim_text, tokens);
    Ok(tokens
        .iter()
        .zip(ranges)
        .map(|(t, r)| {
            let mut t = t.clone();
            t.is_entity = r.is_some_and(|r| {
                // ignore leading whitespace of the token
                let trimmed = r.start + (claim_text[r.clone()].len() - claim_text[r.clone()].trim_start().len());
                entities.iter().any(|e| trimmed < e.end && e.start < r.end)
            });
            t
        })
        .collect())
}

/// Text a claim is scored as, and the context it is conditioned on. The
/// anchored original span is scored after the prompt and the part of the
/// response preceding it; otherwise the claim text follows the prompt.
pub fn claim_scoring_target(claim: &Claim, record: Option<&PromptRecord>) -> (String, String) {
    let Some(r) = record else {
        return (String::new(), claim.text.clone());
    };
    match claim
        .original_span
        .as_deref()
        .and_then(|s| r.response.find(s).map(|i| (i, s)))
    {
        Some((i, span)) => (format!("{}\n\n{}", r.prompt, &r.response[..i]), span.to_string()),
        None => (format!("{}\n\n", r.prompt), claim.text.clone()),
    }
}

/// Forced-decodes a claim, marks entity tokens and runs the full panel.
pub fn score_claim_panel(
    gateway: &Gateway,
    claim: &Claim,
    record: Option<&PromptRecord>,
    marker: &EntityMarker,
) -> Result<Vec<PanelRecord>> {
    let (context, target) = claim_scoring_target(claim, record);
    let scored = gateway.score_tokens(&context, &target)?;
    if scored.approximate {
        log::warn!("claim {}: token scores are approximate (re-generated)", claim.id);
    }
    let tokens = mark_entity_tokens(&target, &scored.tokens, marker)?;
    Ok(run_estimator_panel(&tokens)?
        .iter()
        .map(|e| PanelRecord::from_entry(&claim.id, e))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{tokenize, GatewayOptions, MockBackend, MockRule, MockSettings};
    use proptest::prelude::*;

    #[test]
    fn scoring_target_uses_anchored_span() {
        let record = PromptRecord {
            prompt_id: "p".into(),
            prompt: "Tell me about Paris.".into(),
            response: "Paris is in France. It has a river.".into(),
        };
        let mut c = Claim::new("c", "p", "Paris has a river.");
        c.original_span = Some("It has a river.".into());
        let (ctx, target) = claim_scoring_target(&c, Some(&record));
        assert_eq!(target, "It has a river.");
        assert_eq!(ctx, "Tell me about Paris.\n\nParis is in France. ");
        c.original_span = None;
        assert_eq!(claim_scoring_target(&c, Some(&record)).1, "Paris has a river.");
        let gw = Gateway::new(MockBackend::new(vec![], MockSettings::default()), GatewayOptions::default());
        let rows = score_claim_panel(&gw, &c, Some(&record), &EntityMarker::Heuristic).unwrap();
        assert_eq!(rows.len(), 32);
        assert!(rows.iter().all(|r| r.claim_id == "c"));
    }

    fn probs(ps: &[f64]) -> Vec<TokenScore> {
        ps.iter().map(|p| TokenScore::new("t", *p, 0.0)).collect()
    }

    fn ents(hs: &[f64]) -> Vec<TokenScore> {
        hs.iter().map(|h| TokenScore::new("t", 0.5, *h)).collect()
    }

    fn spec(s: Statistic, r: Reduction) -> AggregatorSpec {
        AggregatorSpec::new(s, Scope::AllTokens, r)
    }

    #[test]
    fn worked_examples() {
        let p = Statistic::Probability;
        assert_eq!(aggregate(&probs(&[0.5, 1.0]), &spec(p, Reduction::Arithmetic)).unwrap(), 0.75);
        assert!((aggregate(&probs(&[0.25, 1.0]), &spec(p, Reduction::Geometric)).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(aggregate(&probs(&[0.9, 0.2, 0.7]), &spec(p, Reduction::TopK(1))).unwrap(), 0.2);
        assert_eq!(
            aggregate(&ents(&[0.1, 2.0, 0.3]), &spec(Statistic::Entropy, Reduction::TopK(1))).unwrap(),
            -2.0
        );
    }

    #[test]
    fn top_percent_of_forty_uses_two() {
        assert_eq!(top_percent_count(5.0, 40), 2);
        let mut ps: Vec<f64> = (0..40).map(|i| 0.5 + i as f64 / 100.0).collect();
        ps.reverse();
        let s = aggregate(&probs(&ps), &spec(Statistic::Probability, Reduction::TopPercent(5.0))).unwrap();
        assert!((s - 0.505).abs() < 1e-12);
        assert_eq!(top_percent_count(15.0, 3), 1);
    }

    #[test]
    fn empty_entity_scope_is_unavailable() {
        let s = AggregatorSpec::new(Statistic::Probability, Scope::EntityTokens, Reduction::Arithmetic);
        assert!(matches!(aggregate(&probs(&[0.3]), &s), Err(Error::EstimatorUnavailable(_))));
    }

    #[test]
    fn panel_has_32_entries() {
        let panel = run_estimator_panel(&probs(&[0.4, 0.8])).unwrap();
        assert_eq!(panel.len(), 32);
        assert_eq!(panel.iter().filter(|e| e.score.is_none()).count(), 16);
    }

    #[test]
    fn singleton_panel() {
        let tokens = vec![TokenScore { token_text: "x".into(), probability: 0.6, entropy: 0.4, is_entity: true }];
        for e in run_estimator_panel(&tokens).unwrap() {
            let want = match e.spec.statistic {
                Statistic::Probability => 0.6,
                Statistic::Entropy => -0.4,
            };
            assert!((e.score.unwrap() - want).abs() < 1e-12, "{}", e.spec);
        }
    }

    #[test]
    fn spec_keys_round_trip() {
        for s in AggregatorSpec::panel() {
            assert_eq!(s.to_string().parse::<AggregatorSpec>().unwrap(), s);
        }
        assert!("probability/all/top_k_0".parse::<AggregatorSpec>().is_err());
    }

    fn marked(text: &str, marker: &EntityMarker) -> Vec<String> {
        let tokens: Vec<TokenScore> = tokenize(text).into_iter().map(|t| TokenScore::new(t, 0.5, 0.1)).collect();
        mark_entity_tokens(text, &tokens, marker)
            .unwrap()
            .into_iter()
            .filter(|t| t.is_entity)
            .map(|t| t.token_text.trim().to_string())
            .collect()
    }

    #[test]
    fn llm_entity_marking() {
        let gw = Gateway::new(
            MockBackend::new(vec![MockRule::reply("Entities:", "Paris")], MockSettings::default()),
            GatewayOptions::default(),
        );
        assert_eq!(marked("Paris is big", &EntityMarker::llm(gw)), ["Paris"]);
    }

    #[test]
    fn heuristic_marking() {
        assert!(marked("it is a small thing to do", &EntityMarker::Heuristic).is_empty());
        assert_eq!(marked("He was born in 1879", &EntityMarker::Heuristic), ["1879"]);
        assert_eq!(
            marked("The Amber Room was built in March", &EntityMarker::Heuristic),
            ["Amber", "Room", "March"]
        );
    }

    fn arb_tokens() -> impl Strategy<Value = Vec<TokenScore>> {
        proptest::collection::vec((0.001f64..=1.0, 0.0f64..6.0, any::<bool>()), 1..30).prop_map(|v| {
            v.into_iter()
                .map(|(p, h, e)| TokenScore { token_text: "t".into(), probability: p, entropy: h, is_entity: e })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn geometric_at_most_arithmetic(tokens in arb_tokens()) {
            let a = aggregate(&tokens, &spec(Statistic::Probability, Reduction::Arithmetic)).unwrap();
            let g = aggregate(&tokens, &spec(Statistic::Probability, Reduction::Geometric)).unwrap();
            prop_assert!(g <= a + 1e-12);
        }

        #[test]
        fn top_k_beyond_length_is_arithmetic(tokens in arb_tokens(), extra in 0usize..5) {
            for stat in [Statistic::Probability, Statistic::Entropy] {
                let a = aggregate(&tokens, &spec(stat, Reduction::Arithmetic)).unwrap();
                let k = aggregate(&tokens, &spec(stat, Reduction::TopK(tokens.len() + extra))).unwrap();
                prop_assert!((a - k).abs() < 1e-12);
            }
        }

        #[test]
        fn permutation_invariant(tokens in arb_tokens(), rot in 0usize..30) {
            let mut shuffled = tokens.clone();
            let len = shuffled.len();
            shuffled.rotate_left(rot % len);
            shuffled.reverse();
            let a = run_estimator_panel(&tokens).unwrap();
            let b = run_estimator_panel(&shuffled).unwrap();
            for (x, y) in a.iter().zip(&b) {
                match (x.score, y.score) {
                    (Some(u), Some(v)) => prop_assert!((u - v).abs() < 1e-12),
                    (None, None) => {}
                    _ => prop_assert!(false),
                }
            }
        }
    }
}
