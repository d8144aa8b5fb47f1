//! Decisions, balanced accuracy and threshold calibration.
//!
//! The factual class is the positive class. All metrics are ratios of exact
//! integer counts.

mod report;
mod threshold;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Label;

pub use report::{
    evaluate, score_histogram, stratify_by_length, write_histogram_csv, write_report_csv,
    LengthBounds, StratumItem,
};
pub use threshold::{
    candidate_thresholds, search_dual_thresholds, search_threshold, DualFit, ThresholdFit,
    THRESHOLD_EPS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prediction {
    Factual,
    Hallucinated,
    Unknown,
}

/// Factual iff `p` strictly exceeds `tau`.
pub fn classify(p: f64, tau: f64) -> Prediction {
    if p > tau {
        Prediction::Factual
    } else {
        Prediction::Hallucinated
    }
}

/// Factual above `alpha_high`, hallucinated below `alpha_low`, unknown between.
pub fn classify_tri(p: f64, alpha_low: f64, alpha_high: f64) -> Prediction {
    debug_assert!(alpha_low <= alpha_high);
    if p > alpha_high {
        Prediction::Factual
    } else if p < alpha_low {
        Prediction::Hallucinated
    } else {
        Prediction::Unknown
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
    /// Unknown predictions on factual claims.
    pub unknown_factual: usize,
    /// Unknown predictions on hallucinated claims.
    pub unknown_hallucinated: usize,
}

impl Confusion {
    pub fn from_predictions(predictions: &[Prediction], labels: &[Label]) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::InvalidInput(format!(
                "{} predictions for {} labels",
                predictions.len(),
                labels.len()
            )));
        }
        let mut c = Confusion::default();
        for (p, l) in predictions.iter().zip(labels) {
            match (l, p) {
                (Label::Factual, Prediction::Factual) => c.tp += 1,
                (Label::Factual, Prediction::Hallucinated) => c.fn_ += 1,
                (Label::Factual, Prediction::Unknown) => c.unknown_factual += 1,
                (Label::Hallucinated, Prediction::Hallucinated) => c.tn += 1,
                (Label::Hallucinated, Prediction::Factual) => c.fp += 1,
                (Label::Hallucinated, Prediction::Unknown) => c.unknown_hallucinated += 1,
                (Label::Unlabeled, _) => {
                    return Err(Error::InvalidInput("cannot score an unlabeled claim".into()))
                }
            }
        }
        Ok(c)
    }

    pub fn factual(&self) -> usize {
        self.tp + self.fn_ + self.unknown_factual
    }

    pub fn hallucinated(&self) -> usize {
        self.tn + self.fp + self.unknown_hallucinated
    }

    pub fn n_unknown(&self) -> usize {
        self.unknown_factual + self.unknown_hallucinated
    }

    /// BAcc over decided claims; `None` if a class has no decided claim.
    pub fn bacc(&self) -> Option<f64> {
        let (pos, neg) = (self.tp + self.fn_, self.tn + self.fp);
        (pos > 0 && neg > 0)
            .then(|| 0.5 * (self.tp as f64 / pos as f64 + self.tn as f64 / neg as f64))
    }

    /// BAcc with unknown predictions counted correct; `None` if a class is absent.
    pub fn bacc_unknown(&self) -> Option<f64> {
        let (pos, neg) = (self.factual(), self.hallucinated());
        (pos > 0 && neg > 0).then(|| {
            0.5 * ((self.tp + self.unknown_factual) as f64 / pos as f64
                + (self.tn + self.unknown_hallucinated) as f64 / neg as f64)
        })
    }
}

fn require_both_classes(labels: &[Label]) -> Result<()> {
    let f = labels.iter().any(|l| *l == Label::Factual);
    let h = labels.iter().any(|l| *l == Label::Hallucinated);
    if f && h {
        Ok(())
    } else {
        Err(Error::UndefinedMetric(
            "balanced accuracy needs both factual and hallucinated labels".into(),
        ))
    }
}

/// ½(TP/(TP+FN) + TN/(TN+FP)) over binary predictions.
pub fn bacc(predictions: &[Prediction], labels: &[Label]) -> Result<f64> {
    require_both_classes(labels)?;
    if predictions.contains(&Prediction::Unknown) {
        return Err(Error::InvalidInput(
            "binary BAcc got unknown predictions; use bacc_unknown".into(),
        ));
    }
    let c = Confusion::from_predictions(predictions, labels)?;
    Ok(c.bacc().expect("both classes present"))
}

/// BAcc where an unknown prediction counts as correct for its gold class.
pub fn bacc_unknown(predictions: &[Prediction], labels: &[Label]) -> Result<f64> {
    require_both_classes(labels)?;
    let c = Confusion::from_predictions(predictions, labels)?;
    Ok(c.bacc_unknown().expect("both classes present"))
}
