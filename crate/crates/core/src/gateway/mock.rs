//! Scripted offline backend.
//!
//! A script is JSON Lines. Each line is either a matcher rule or a
//! `{"settings": {...}}` record. Rules are tried in file order; the first
//! whose `contains` substring occurs in the request text (and whose `kind`
//! fits the call) decides the output. Anything unmatched comes from a
//! generator seeded by the request content, so outputs are a pure function
//! of (request, settings seed).

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, Candidate, GeneratedToken, GenerationRequest, GenerationResult, HiddenStates};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MockKind {
    Chat,
    Score,
    Hidden,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockToken {
    pub text: String,
    pub logprob: f64,
    #[serde(default)]
    pub top: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    /// Substring matched against the request text; empty matches everything.
    #[serde(default)]
    pub contains: String,
    #[serde(default)]
    pub kind: Option<MockKind>,
    #[serde(default)]
    pub reply: Option<String>,
    /// Sampling variants, selected by `seed % len` when temperature > 0.
    #[serde(default)]
    pub replies: Option<Vec<String>>,
    /// Explicit tokens for chat replies or scored continuations.
    #[serde(default)]
    pub tokens: Option<Vec<MockToken>>,
    /// First-position candidate probabilities, e.g. `{"True": 0.6, "False": 0.2}`.
    #[serde(default)]
    pub label_probs: Option<BTreeMap<String, f64>>,
    /// Realized-token probabilities for scored continuations, cycled.
    #[serde(default)]
    pub token_probs: Option<Vec<f64>>,
    #[serde(default)]
    pub fail: bool,
    #[serde(default)]
    pub fail_seeds: Vec<u64>,
    /// Added to every hidden-state component.
    #[serde(default)]
    pub hidden_shift: Option<f64>,
}

impl MockRule {
    pub fn reply(contains: impl Into<String>, reply: impl Into<String>) -> Self {
        MockRule {
            contains: contains.into(),
            kind: Some(MockKind::Chat),
            reply: Some(reply.into()),
            ..Default::default()
        }
    }

    fn fits(&self, kind: MockKind, text: &str) -> bool {
        self.kind.is_none_or(|k| k == kind) && text.contains(&self.contains)
    }
}

fn default_name() -> String {
    "mock".into()
}
fn default_layers() -> usize {
    4
}
fn default_width() -> usize {
    8
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockSettings {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_width")]
    pub hidden_size: usize,
    #[serde(default)]
    pub vocab_size: Option<usize>,
    #[serde(default = "default_true")]
    pub logprobs: bool,
    #[serde(default = "default_true")]
    pub scoring: bool,
    #[serde(default = "default_true")]
    pub hidden_states: bool,
}

impl Default for MockSettings {
    fn default() -> Self {
        MockSettings {
            name: default_name(),
            seed: 0,
            layers: default_layers(),
            hidden_size: default_width(),
            vocab_size: None,
            logprobs: true,
            scoring: true,
            hidden_states: true,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    pub rules: Vec<MockRule>,
    pub settings: MockSettings,
}

#[derive(Deserialize)]
struct SettingsLine {
    settings: MockSettings,
}

/// Splits text into word, punctuation and whitespace-led pieces whose
/// concatenation is the original text.
pub fn tokenize(text: &str) -> Vec<String> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"\s*(?:\w+|[^\w\s])|\s+").unwrap());
    re.find_iter(text).map(|m| m.as_str().to_string()).collect()
}

fn rng_for(parts: &[&[u8]]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(seed)
}

const FILLER: &[&str] = &[
    "the", "river", "city", "was", "founded", "in", "century", "by", "a", "group", "of",
    "merchants", "and", "it", "became", "known", "for", "its", "library", "bridge",
];

impl MockBackend {
    pub fn new(rules: Vec<MockRule>, settings: MockSettings) -> Self {
        MockBackend { rules, settings }
    }

    pub fn from_script(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut backend = MockBackend::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |e: serde_json::Error| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                field: "<rule>".into(),
                message: e.to_string(),
            };
            let value: serde_json::Value = serde_json::from_str(line).map_err(parse_err)?;
            if value.get("settings").is_some() {
                backend.settings = serde_json::from_value::<SettingsLine>(value)
                    .map_err(parse_err)?
                    .settings;
            } else {
                backend.rules.push(serde_json::from_value(value).map_err(parse_err)?);
            }
        }
        Ok(backend)
    }

    fn find(&self, kind: MockKind, text: &str) -> Option<&MockRule> {
        self.rules.iter().find(|r| r.fits(kind, text))
    }

    fn seed_bytes(&self) -> [u8; 8] {
        self.settings.seed.to_le_bytes()
    }

    /// Realized token plus a few lower-probability alternates.
    fn synth_token(rng: &mut ChaCha8Rng, text: &str, p: f64, top: u32) -> GeneratedToken {
        let mut cands = vec![Candidate {
            token: text.to_string(),
            logprob: p.ln(),
        }];
        let mut rest = 1.0 - p;
        for j in 0..3 {
            if rest <= 1e-9 {
                break;
            }
            let share = rest * rng.random_range(0.3..0.7);
            rest -= share;
            cands.push(Candidate {
                token: format!("<alt{j}>"),
                logprob: share.ln(),
            });
        }
        finish_token(text.to_string(), p.ln(), cands, top)
    }
}

fn finish_token(token: String, logprob: f64, mut cands: Vec<Candidate>, top: u32) -> GeneratedToken {
    cands.sort_by(|a, b| b.logprob.total_cmp(&a.logprob).then_with(|| a.token.cmp(&b.token)));
    cands.truncate(top as usize);
    GeneratedToken {
        token,
        logprob,
        top_candidates: cands,
    }
}

fn explicit_tokens(tokens: &[MockToken], top: u32) -> Vec<GeneratedToken> {
    tokens
        .iter()
        .map(|t| {
            let cands = t
                .top
                .iter()
                .map(|(tok, lp)| Candidate {
                    token: tok.clone(),
                    logprob: *lp,
                })
                .collect();
            finish_token(t.text.clone(), t.logprob, cands, top)
        })
        .collect()
}

impl Backend for MockBackend {
    fn name(&self) -> &str {
        &self.settings.name
    }

    fn chat(&self, request: &GenerationRequest) -> Result<GenerationResult> {
        let prompt = request.prompt_text();
        let sampling = request.temperature > 0.0;
        // greedy decoding ignores the seed
        let seed = if sampling { request.seed.unwrap_or(0) } else { 0 };
        let rule = self.find(MockKind::Chat, &prompt);
        if let Some(r) = rule {
            if r.fail || (sampling && r.fail_seeds.contains(&seed)) {
                return Err(Error::Generation(format!("scripted failure (seed {seed})")));
            }
        }
        let top = if self.settings.logprobs { request.top_logprobs } else { 0 };
        let mut rng = rng_for(&[
            &self.seed_bytes(),
            prompt.as_bytes(),
            &seed.to_le_bytes(),
            &request.temperature.to_le_bytes(),
        ]);

        let scripted_text = rule.and_then(|r| {
            match (&r.replies, &r.reply) {
                (Some(v), _) if !v.is_empty() && sampling => Some(v[(seed % v.len() as u64) as usize].clone()),
                (_, Some(s)) => Some(s.clone()),
                (Some(v), None) if !v.is_empty() => Some(v[0].clone()),
                _ => None,
            }
        });

        let mut tokens = if let Some(explicit) = rule.and_then(|r| r.tokens.as_ref()) {
            explicit_tokens(explicit, top)
        } else {
            let label_probs = rule.and_then(|r| r.label_probs.as_ref());
            let text = match (&scripted_text, label_probs) {
                (Some(t), _) => t.clone(),
                (None, Some(lp)) => lp
                    .iter()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(k, _)| k.clone())
                    .unwrap_or_default(),
                (None, None) => {
                    let n = rng.random_range(6..12);
                    let words: Vec<&str> =
                        (0..n).map(|_| FILLER[rng.random_range(0..FILLER.len())]).collect();
                    let mut s = words.join(" ");
                    s.push('.');
                    s
                }
            };
            let mut out: Vec<GeneratedToken> = tokenize(&text)
                .into_iter()
                .map(|t| {
                    let p = rng.random_range(0.3..1.0);
                    Self::synth_token(&mut rng, &t, p, top)
                })
                .collect();
            if let (Some(lp), Some(first)) = (label_probs, out.first_mut()) {
                let cands: Vec<Candidate> = lp
                    .iter()
                    .map(|(k, p)| Candidate {
                        token: k.clone(),
                        logprob: p.ln(),
                    })
                    .collect();
                let realized = lp
                    .get(first.token.trim())
                    .map(|p| p.ln())
                    .unwrap_or(first.logprob);
                *first = finish_token(first.token.clone(), realized, cands, top);
            }
            out
        };
        tokens.truncate(request.max_tokens as usize);
        let text = tokens.iter().map(|t| t.token.as_str()).collect();
        Ok(GenerationResult { text, tokens })
    }

    fn score_continuation(
        &self,
        context: &str,
        continuation: &str,
        top_logprobs: u32,
    ) -> Result<Vec<GeneratedToken>> {
        if !self.settings.scoring {
            return Err(Error::Capability {
                backend: self.name().to_string(),
                capability: "completion scoring".into(),
                hint: "scoring disabled in mock settings".into(),
            });
        }
        let rule = self.find(MockKind::Score, continuation);
        if let Some(tokens) = rule.and_then(|r| r.tokens.as_ref()) {
            return Ok(explicit_tokens(tokens, top_logprobs));
        }
        let mut rng = rng_for(&[&self.seed_bytes(), context.as_bytes(), continuation.as_bytes()]);
        let probs = rule.and_then(|r| r.token_probs.as_ref()).filter(|v| !v.is_empty());
        Ok(tokenize(continuation)
            .into_iter()
            .enumerate()
            .map(|(i, t)| {
                let p = match probs {
                    Some(v) => v[i % v.len()].clamp(1e-12, 1.0),
                    None => rng.random_range(0.05..1.0),
                };
                Self::synth_token(&mut rng, &t, p, top_logprobs)
            })
            .collect())
    }

    fn hidden_states(&self, text: &str) -> Result<HiddenStates> {
        if !self.settings.hidden_states {
            return Err(Error::Capability {
                backend: self.name().to_string(),
                capability: "hidden states".into(),
                hint: "enable hidden_states in the mock settings".into(),
            });
        }
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::InvalidInput("cannot embed empty text".into()));
        }
        let shift = self
            .find(MockKind::Hidden, text)
            .and_then(|r| r.hidden_shift)
            .unwrap_or(0.0);
        let width = self.settings.hidden_size;
        let layer = |l: usize| -> Vec<Vec<f64>> {
            tokens
                .iter()
                .enumerate()
                .map(|(pos, tok)| {
                    let mut rng = rng_for(&[
                        &self.seed_bytes(),
                        tok.as_bytes(),
                        &(pos as u64).to_le_bytes(),
                        &(l as u64).to_le_bytes(),
                    ]);
                    (0..width).map(|_| rng.random_range(-1.0..1.0) + shift).collect()
                })
                .collect()
        };
        Ok(HiddenStates {
            layers: (1..=self.settings.layers).map(layer).collect(),
            embedding_layer: Some(layer(0)),
        })
    }

    fn supports_logprobs(&self) -> bool {
        self.settings.logprobs
    }

    fn vocab_size(&self) -> Option<usize> {
        self.settings.vocab_size
    }

    fn count_tokens(&self, text: &str) -> Option<usize> {
        Some(tokenize(text).len())
    }
}
