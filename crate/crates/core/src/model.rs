//! Shared records and the dataset split used across the toolkit.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Factual,
    Hallucinated,
    Unlabeled,
}

impl Label {
    pub fn is_labeled(self) -> bool {
        self != Label::Unlabeled
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s.trim().to_ascii_lowercase().as_str() {
            "factual" | "true" | "supported" => Some(Label::Factual),
            "hallucinated" | "false" | "not supported" | "unsupported" => {
                Some(Label::Hallucinated)
            }
            "unlabeled" => Some(Label::Unlabeled),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Factual => "factual",
            Label::Hallucinated => "hallucinated",
            Label::Unlabeled => "unlabeled",
        })
    }
}

fn default_true() -> bool {
    true
}

fn default_unlabeled() -> Label {
    Label::Unlabeled
}

/// One atomized statement extracted from a long-form response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Claim {
    pub id: String,
    pub prompt_id: String,
    pub text: String,
    #[serde(default)]
    pub original_span: Option<String>,
    #[serde(default = "default_unlabeled")]
    pub label: Label,
    #[serde(default = "default_true")]
    pub relevant: bool,
}

impl Claim {
    pub fn new(id: impl Into<String>, prompt_id: impl Into<String>, text: impl Into<String>) -> Self {
        Claim {
            id: id.into(),
            prompt_id: prompt_id.into(),
            text: text.into(),
            original_span: None,
            label: Label::Unlabeled,
            relevant: true,
        }
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.label = label;
        self
    }
}

/// Per-token record produced by forced decoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token_text: String,
    /// In (0, 1].
    pub probability: f64,
    /// Nats, non-negative.
    pub entropy: f64,
    #[serde(default)]
    pub is_entity: bool,
}

impl TokenScore {
    pub fn new(token_text: impl Into<String>, probability: f64, entropy: f64) -> Self {
        TokenScore {
            token_text: token_text.into(),
            probability,
            entropy,
            is_entity: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorScore {
    pub claim_id: String,
    pub detector_id: String,
    pub p_factual: f64,
    #[serde(default)]
    pub rationale: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Detect,
    Qa,
}

/// Instruction-tuning record. Detection outputs start with the bare label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneExample {
    pub instruction: String,
    pub input: String,
    pub output: String,
    pub task: Task,
    pub source_claim_id: String,
}

/// Input row for decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub prompt_id: String,
    pub prompt: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum ThresholdConfig {
    Single { tau: f64 },
    Dual { alpha_low: f64, alpha_high: f64 },
}

impl ThresholdConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = |x: f64| x.is_finite();
        match *self {
            ThresholdConfig::Single { tau } if finite(tau) => Ok(()),
            ThresholdConfig::Dual { alpha_low, alpha_high }
                if finite(alpha_low) && finite(alpha_high) && alpha_low <= alpha_high =>
            {
                Ok(())
            }
            other => Err(Error::InvalidInput(format!("invalid thresholds {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub factual_counts: Vec<usize>,
    pub hallucinated_counts: Vec<usize>,
}

/// Confusion counts and metrics for one evaluated claim set.
///
/// `bacc` is `None` when one of the two classes is absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
    pub n_unknown: usize,
    pub bacc: Option<f64>,
    #[serde(default)]
    pub bacc_unknown: Option<f64>,
    pub thresholds: ThresholdConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strata: Option<BTreeMap<String, EvalReport>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub histogram: Option<Histogram>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length_unit: Option<String>,
}

impl EvalReport {
    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.tn + self.fp + self.n_unknown
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.7,
            validation: 0.2,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.validation, self.test];
        if all.iter().any(|r| !(*r > 0.0 && *r < 1.0)) {
            return Err(Error::InvalidInput(format!("split ratios must lie in (0,1): {all:?}")));
        }
        if (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("split ratios must sum to 1: {all:?}")));
        }
        Ok(())
    }

    /// (train, validation, test) sizes: floor for validation and test, the remainder to train.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let val = (n as f64 * self.validation).floor() as usize;
        let test = (n as f64 * self.test).floor() as usize;
        (n - val - test, val, test)
    }
}

/// Seeded shuffle-then-cut split. With `stratified`, each label group is cut
/// separately and the pieces concatenated in label order.
pub fn split_dataset(
    claims: &[Claim],
    ratios: SplitRatios,
    seed: u64,
    stratified: bool,
) -> Result<DatasetSplit> {
    ratios.validate()?;
    if claims.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "need at least 3 claims to split, got {}",
            claims.len()
        )));
    }
    let mut seen = HashSet::new();
    for c in claims {
        if !seen.insert(c.id.as_str()) {
            return Err(Error::InvalidInput(format!("duplicate claim id {}", c.id)));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<String>> = if stratified {
        let mut by_label: BTreeMap<Label, Vec<String>> = BTreeMap::new();
        for c in claims {
            by_label.entry(c.label).or_default().push(c.id.clone());
        }
        by_label.into_values().collect()
    } else {
        vec![claims.iter().map(|c| c.id.clone()).collect()]
    };

    let mut split = DatasetSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        seed,
    };
    for mut ids in groups {
        ids.shuffle(&mut rng);
        let (_, n_val, n_test) = ratios.sizes(ids.len());
        let rest = ids.split_off(n_val + n_test);
        let test = ids.split_off(n_val);
        split.validation.extend(ids);
        split.test.extend(test);
        split.train.extend(rest);
    }
    Ok(split)
}

pub fn read_claims(path: impl AsRef<Path>) -> Result<Vec<Claim>> {
    jsonl::read(path)
}

pub fn write_claims(claims: &[Claim], path: impl AsRef<Path>) -> Result<()> {
    jsonl::write(path, claims)
}
