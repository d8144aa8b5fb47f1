//! Prompting-family detectors and the fine-tuned-model detector. Each emits
//! a [`DetectorScore`] with `p_factual` in [0, 1].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::claims::{parse_yes_no, render};
use crate::error::{Error, Result};
use crate::gateway::{collect_all, Gateway, GeneratedToken, GenerationRequest};
use crate::model::{Claim, DetectorScore};

/// Instruction shared by the True/False detector and detection training data.
pub const DETECTION_INSTRUCTION: &str =
    "Determine whether the following claim is factually correct. Answer with True or False.";

pub const DEFAULT_TF_TEMPLATE: &str = "\
Determine whether the following claim is factually correct. Answer with True or False.

Claim: {claim}
Answer:";

pub const DEFAULT_PROB_TEMPLATE: &str = "\
What is the probability that the following claim is factually correct? \
Reply with a single number between 0 and 1.

Claim: {claim}
Probability:";

pub const DEFAULT_COT_TEMPLATE: &str = "\
Determine whether the following claim is factually correct. Reason step by \
step about the facts involved, then give your final judgment as True or False \
on the last line.

Claim: {claim}";

pub const DEFAULT_SUPPORT_TEMPLATE: &str = "\
Context: {sample}

Claim: {claim}

Is the claim supported by the context above? Answer Yes or No.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    PromptTf,
    PromptProb,
    PromptCotTf,
    Selfcheck,
    Finetuned,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 5] = [
        DetectorKind::PromptTf,
        DetectorKind::PromptProb,
        DetectorKind::PromptCotTf,
        DetectorKind::Selfcheck,
        DetectorKind::Finetuned,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::PromptTf => "prompt_tf",
            DetectorKind::PromptProb => "prompt_prob",
            DetectorKind::PromptCotTf => "prompt_cot_tf",
            DetectorKind::Selfcheck => "selfcheck",
            DetectorKind::Finetuned => "finetuned",
        }
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DetectorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = DetectorKind::ALL.iter().map(|k| k.name()).collect();
                Error::InvalidInput(format!(
                    "unknown detector {s:?}; valid: {}",
                    valid.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub detector_id: String,
    pub template: String,
    /// Sampled responses per claim (selfcheck).
    pub n_samples: usize,
    /// Sampling temperature (selfcheck).
    pub temperature: f64,
    /// Report P(True)/(P(True)+P(False)) instead of raw P(True).
    pub normalize_label_probs: bool,
    pub support_template: String,
    pub seed: u64,
    /// Candidates requested for the first generated token.
    pub top_logprobs: u32,
}

impl DetectorConfig {
    pub fn for_kind(kind: DetectorKind) -> Self {
        let template = match kind {
            DetectorKind::PromptTf | DetectorKind::Finetuned => DEFAULT_TF_TEMPLATE,
            DetectorKind::PromptProb => DEFAULT_PROB_TEMPLATE,
            DetectorKind::PromptCotTf => DEFAULT_COT_TEMPLATE,
            // the claim is judged against each sample by the support template
            DetectorKind::Selfcheck => "{prompt}",
        };
        DetectorConfig {
            detector_id: kind.name().to_string(),
            template: template.to_string(),
            n_samples: 20,
            temperature: 1.0,
            normalize_label_probs: true,
            support_template: DEFAULT_SUPPORT_TEMPLATE.to_string(),
            seed: 0,
            top_logprobs: 20,
        }
    }

    fn validate(&self, kind: DetectorKind) -> Result<()> {
        if kind == DetectorKind::Selfcheck {
            if self.n_samples == 0 {
                return Err(Error::InvalidInput("selfcheck needs n_samples >= 1".into()));
            }
            if !(self.temperature > 0.0) {
                return Err(Error::InvalidInput("selfcheck needs temperature > 0".into()));
            }
        }
        Ok(())
    }
}

/// P(True) and P(False) from one position's candidates, merging case and
/// leading-space variants. `None` when neither label appears.
pub fn label_probabilities(token: &GeneratedToken) -> Option<(f64, f64)> {
    let mut seen: BTreeMap<&str, f64> = token
        .top_candidates
        .iter()
        .map(|c| (c.token.as_str(), c.logprob))
        .collect();
    seen.entry(token.token.as_str()).or_insert(token.logprob);
    let (mut t, mut f, mut found) = (0.0, 0.0, false);
    for (tok, lp) in seen {
        match tok.trim().to_lowercase().as_str() {
            "true" => {
                t += lp.exp();
                found = true;
            }
            "false" => {
                f += lp.exp();
                found = true;
            }
            _ => {}
        }
    }
    found.then_some((t, f))
}

pub fn label_score(p_true: f64, p_false: f64, normalize: bool) -> f64 {
    let p = if normalize {
        if p_true + p_false > 0.0 {
            p_true / (p_true + p_false)
        } else {
            0.5
        }
    } else {
        p_true
    };
    p.clamp(0.0, 1.0)
}

/// First number in a reply, as a probability; percentages are divided by 100.
pub fn parse_probability(reply: &str) -> Option<f64> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(\d+(?:\.\d+)?|\.\d+)\s*(%)?").unwrap());
    let caps = re.captures(reply)?;
    let mut v: f64 = caps[1].parse().ok()?;
    if caps.get(2).is_some() {
        v /= 100.0;
    }
    Some(v.clamp(0.0, 1.0))
}

/// Last standalone True/False in a reasoning reply.
pub fn extract_verdict(reply: &str) -> Option<bool> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(?i)\b(true|false)\b").unwrap());
    re.find_iter(reply)
        .last()
        .map(|m| m.as_str().eq_ignore_ascii_case("true"))
}

#[derive(Debug, Clone)]
pub struct Detector {
    kind: DetectorKind,
    config: DetectorConfig,
    gateway: Gateway,
}

impl Detector {
    pub fn new(kind: DetectorKind, gateway: Gateway) -> Self {
        Detector {
            kind,
            config: DetectorConfig::for_kind(kind),
            gateway,
        }
    }

    pub fn with_config(kind: DetectorKind, config: DetectorConfig, gateway: Gateway) -> Result<Self> {
        config.validate(kind)?;
        Ok(Detector {
            kind,
            config,
            gateway,
        })
    }

    pub fn id(&self) -> &str {
        &self.config.detector_id
    }

    pub fn kind(&self) -> DetectorKind {
        self.kind
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    /// `source_prompt` is the question the claim's response answered; only
    /// selfcheck uses it.
    pub fn score(&self, claim: &Claim, source_prompt: &str) -> Result<DetectorScore> {
        let (p, rationale) = match self.kind {
            DetectorKind::PromptTf | DetectorKind::Finetuned => (self.first_token_label(claim)?, None),
            DetectorKind::PromptProb => (self.stated_probability(claim)?, None),
            DetectorKind::PromptCotTf => {
                let (p, reasoning) = self.reasoned_verdict(claim)?;
                (p, Some(reasoning))
            }
            DetectorKind::Selfcheck => (self.sample_consistency(claim, source_prompt)?, None),
        };
        Ok(DetectorScore {
            claim_id: claim.id.clone(),
            detector_id: self.config.detector_id.clone(),
            p_factual: p,
            rationale,
        })
    }

    fn prompt(&self, claim: &Claim) -> String {
        render(&self.config.template, &[("claim", &claim.text)])
    }

    fn first_token_label(&self, claim: &Claim) -> Result<f64> {
        let req = GenerationRequest::user(self.prompt(claim))
            .max_tokens(1)
            .top_logprobs(self.config.top_logprobs);
        let result = self.gateway.generate(&req)?;
        let first = result
            .tokens
            .first()
            .ok_or_else(|| Error::detector(self.id(), "backend returned no token log-probabilities"))?;
        let (t, f) = label_probabilities(first).ok_or_else(|| {
            let dump: Vec<String> = first
                .top_candidates
                .iter()
                .map(|c| format!("{:?}={:.4}", c.token, c.logprob))
                .collect();
            Error::detector(
                self.id(),
                format!("neither True nor False among first-token candidates [{}]", dump.join(", ")),
            )
        })?;
        Ok(label_score(t, f, self.config.normalize_label_probs))
    }

    fn stated_probability(&self, claim: &Claim) -> Result<f64> {
        let reply = self.gateway.generate(&GenerationRequest::user(self.prompt(claim)))?.text;
        parse_probability(&reply)
            .ok_or_else(|| Error::detector(self.id(), format!("no probability in reply {reply:?}")))
    }

    fn reasoned_verdict(&self, claim: &Claim) -> Result<(f64, String)> {
        let reply = self.gateway.generate(&GenerationRequest::user(self.prompt(claim)))?.text;
        match extract_verdict(&reply) {
            Some(v) => Ok((if v { 1.0 } else { 0.0 }, reply)),
            None => Err(Error::detector(self.id(), format!("no final verdict in reply {reply:?}"))),
        }
    }

    fn sample_consistency(&self, claim: &Claim, source_prompt: &str) -> Result<f64> {
        let req = GenerationRequest::user(render(&self.config.template, &[("prompt", source_prompt)]))
            .temperature(self.config.temperature)
            .seed(self.config.seed);
        let samples = self.gateway.sample_n(&req, self.config.n_samples)?;
        let verdicts = self.gateway.map_concurrent(&samples, |i, s| {
            let prompt = render(
                &self.config.support_template,
                &[("sample", &s.text), ("claim", &claim.text)],
            );
            let reply = self.gateway.generate(&GenerationRequest::user(prompt))?.text;
            Ok(parse_yes_no(&reply).unwrap_or_else(|| {
                log::warn!("claim {}: sample {i} support reply {reply:?} is not yes/no", claim.id);
                false
            }))
        });
        let supports = collect_all(verdicts)?.into_iter().filter(|s| *s).count();
        Ok(supports as f64 / self.config.n_samples as f64)
    }
}
