use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{require_both_classes, Confusion};
use crate::error::{Error, Result};
use crate::model::Label;

/// Offset of the outermost candidates beyond the score range.
pub const THRESHOLD_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFit {
    pub tau: f64,
    pub bacc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualFit {
    pub alpha_low: f64,
    pub alpha_high: f64,
    pub bacc_unknown: f64,
    /// BAcc over decided (non-unknown) claims.
    pub bacc_decided: f64,
    pub n_unknown: usize,
}

/// Midpoints of adjacent distinct scores plus one point below and one above
/// every score, ascending. For scores in [0,1] the outer points are −ε and 1+ε.
pub fn candidate_thresholds(scores: &[f64]) -> Vec<f64> {
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let lo = distinct.first().copied().unwrap_or(0.0).min(0.0) - THRESHOLD_EPS;
    let hi = distinct.last().copied().unwrap_or(1.0).max(1.0) + THRESHOLD_EPS;
    let mut out = Vec::with_capacity(distinct.len() + 1);
    out.push(lo);
    out.extend(distinct.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    out.push(hi);
    out
}

fn check_inputs(scores: &[f64], labels: &[Label]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("scores must be finite".into()));
    }
    if labels.contains(&Label::Unlabeled) {
        return Err(Error::InvalidInput("cannot calibrate on unlabeled claims".into()));
    }
    require_both_classes(labels)
}

/// For each candidate, how many factual / hallucinated scores lie below it.
/// No score equals a candidate, so "below" and "not above" coincide.
fn counts_below(scores: &[f64], labels: &[Label], candidates: &[f64]) -> (Vec<usize>, Vec<usize>) {
    let mut pairs: Vec<(f64, Label)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut f = Vec::with_capacity(candidates.len());
    let mut h = Vec::with_capacity(candidates.len());
    let (mut i, mut nf, mut nh) = (0, 0, 0);
    for &c in candidates {
        while i < pairs.len() && pairs[i].0 < c {
            match pairs[i].1 {
                Label::Factual => nf += 1,
                _ => nh += 1,
            }
            i += 1;
        }
        f.push(nf);
        h.push(nh);
    }
    (f, h)
}

/// Threshold maximizing BAcc of `p > tau`; ties go to the smallest tau.
/// BAcc is constant between adjacent candidates, so this is optimal over
/// every real threshold.
pub fn search_threshold(scores: &[f64], labels: &[Label]) -> Result<ThresholdFit> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|l| **l == Label::Factual).count();
    let neg = labels.len() - pos;
    let candidates = candidate_thresholds(scores);
    let (below_f, below_h) = counts_below(scores, labels, &candidates);
    // BAcc ∝ TP·neg + TN·pos, compared exactly in integers
    let mut best: Option<(u128, usize)> = None;
    for i in 0..candidates.len() {
        let tp = (pos - below_f[i]) as u128;
        let tn = below_h[i] as u128;
        let num = tp * neg as u128 + tn * pos as u128;
        if best.is_none_or(|(b, _)| num > b) {
            best = Some((num, i));
        }
    }
    let (_, i) = best.expect("at least two candidates");
    let c = Confusion {
        tp: pos - below_f[i],
        fn_: below_f[i],
        tn: below_h[i],
        fp: neg - below_h[i],
        ..Default::default()
    };
    Ok(ThresholdFit {
        tau: candidates[i],
        bacc: c.bacc().expect("both classes present"),
    })
}

#[derive(Debug, Clone, Copy)]
struct PairEval {
    low: usize,
    high: usize,
    num: u128,
    unknown: usize,
    width: f64,
    bacc_decided: Option<f64>,
}

/// Ranking: larger BAcc-unknown, then fewer unknowns, then a narrower band,
/// then the smaller `alpha_low`.
fn better(a: &PairEval, b: &PairEval, candidates: &[f64]) -> bool {
    a.num
        .cmp(&b.num)
        .then(b.unknown.cmp(&a.unknown))
        .then(b.width.total_cmp(&a.width))
        .then(candidates[b.low].total_cmp(&candidates[a.low]))
        == Ordering::Greater
}

/// Exhaustive search over candidate pairs `alpha_low <= alpha_high` for the
/// maximum BAcc-unknown among pairs whose decided-claim BAcc exceeds
/// `min_bacc`.
pub fn search_dual_thresholds(scores: &[f64], labels: &[Label], min_bacc: f64) -> Result<DualFit> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|l| **l == Label::Factual).count();
    let neg = labels.len() - pos;
    let candidates = candidate_thresholds(scores);
    let (below_f, below_h) = counts_below(scores, labels, &candidates);

    let mut best_feasible: Option<PairEval> = None;
    let mut best_any: Option<PairEval> = None;
    for low in 0..candidates.len() {
        for high in low..candidates.len() {
            let fn_ = below_f[low];
            let tn = below_h[low];
            let tp = pos - below_f[high];
            let fp = neg - below_h[high];
            let uf = below_f[high] - below_f[low];
            let uh = below_h[high] - below_h[low];
            let bacc_decided = (tp + fn_ > 0 && tn + fp > 0).then(|| {
                0.5 * (tp as f64 / (tp + fn_) as f64 + tn as f64 / (tn + fp) as f64)
            });
            let e = PairEval {
                low,
                high,
                num: (tp + uf) as u128 * neg as u128 + (tn + uh) as u128 * pos as u128,
                unknown: uf + uh,
                width: candidates[high] - candidates[low],
                bacc_decided,
            };
            if best_any.is_none_or(|b| better(&e, &b, &candidates)) {
                best_any = Some(e);
            }
            if bacc_decided.is_some_and(|b| b > min_bacc)
                && best_feasible.is_none_or(|b| better(&e, &b, &candidates))
            {
                best_feasible = Some(e);
            }
        }
    }
    let confusion = |e: &PairEval| Confusion {
        tp: pos - below_f[e.high],
        fn_: below_f[e.low],
        tn: below_h[e.low],
        fp: neg - below_h[e.high],
        unknown_factual: below_f[e.high] - below_f[e.low],
        unknown_hallucinated: below_h[e.high] - below_h[e.low],
    };
    match best_feasible {
        Some(e) => Ok(DualFit {
            alpha_low: candidates[e.low],
            alpha_high: candidates[e.high],
            bacc_unknown: confusion(&e).bacc_unknown().expect("both classes present"),
            bacc_decided: e.bacc_decided.expect("feasible pairs decide both classes"),
            n_unknown: e.unknown,
        }),
        None => {
            let b = best_any.expect("at least one pair");
            Err(Error::Infeasible {
                min_bacc,
                alpha_low: candidates[b.low],
                alpha_high: candidates[b.high],
                bacc_unknown: confusion(&b).bacc_unknown().expect("both classes present"),
            })
        }
    }
}
