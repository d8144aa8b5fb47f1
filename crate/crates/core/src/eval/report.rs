use std::collections::BTreeMap;
use std::path::Path;

use super::{classify, classify_tri, Confusion};
use crate::error::{Error, Result};
use crate::model::{EvalReport, Histogram, Label, ThresholdConfig};

/// Scores a claim set under fixed thresholds. Unlabeled claims are rejected.
pub fn evaluate(scores: &[f64], labels: &[Label], thresholds: ThresholdConfig) -> Result<EvalReport> {
    thresholds.validate()?;
    let predictions: Vec<_> = scores
        .iter()
        .map(|&p| match thresholds {
            ThresholdConfig::Single { tau } => classify(p, tau),
            ThresholdConfig::Dual {
                alpha_low,
                alpha_high,
            } => classify_tri(p, alpha_low, alpha_high),
        })
        .collect();
    let c = Confusion::from_predictions(&predictions, labels)?;
    Ok(EvalReport {
        tp: c.tp,
        fn_: c.fn_,
        tn: c.tn,
        fp: c.fp,
        n_unknown: c.n_unknown(),
        bacc: c.bacc(),
        bacc_unknown: match thresholds {
            ThresholdConfig::Single { .. } => None,
            ThresholdConfig::Dual { .. } => c.bacc_unknown(),
        },
        thresholds,
        strata: None,
        histogram: None,
        length_unit: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LengthBounds {
    pub low: usize,
    pub high: usize,
}

impl Default for LengthBounds {
    fn default() -> Self {
        LengthBounds {
            low: 500,
            high: 1000,
        }
    }
}

impl LengthBounds {
    /// `lt{low}` below `low`, `{low}to{high}` inclusive on both ends, `gt{high}` above.
    pub fn key(&self, length: usize) -> String {
        if length < self.low {
            format!("lt{}", self.low)
        } else if length <= self.high {
            format!("{}to{}", self.low, self.high)
        } else {
            format!("gt{}", self.high)
        }
    }

    pub fn keys(&self) -> [String; 3] {
        [
            format!("lt{}", self.low),
            format!("{}to{}", self.low, self.high),
            format!("gt{}", self.high),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StratumItem {
    pub score: f64,
    pub label: Label,
    /// Length of the source response.
    pub response_length: usize,
}

/// One sub-report per length band; empty bands get all-zero reports.
pub fn stratify_by_length(
    items: &[StratumItem],
    thresholds: ThresholdConfig,
    bounds: LengthBounds,
) -> Result<BTreeMap<String, EvalReport>> {
    let mut out = BTreeMap::new();
    for key in bounds.keys() {
        let (scores, labels): (Vec<f64>, Vec<Label>) = items
            .iter()
            .filter(|it| bounds.key(it.response_length) == key)
            .map(|it| (it.score, it.label))
            .unzip();
        out.insert(key, evaluate(&scores, &labels, thresholds)?);
    }
    Ok(out)
}

/// Equal-width bins over [0,1]; the last bin is closed on the right and
/// out-of-range scores are clamped. Unlabeled claims are skipped.
pub fn score_histogram(scores: &[f64], labels: &[Label], n_bins: usize) -> Result<Histogram> {
    if n_bins == 0 {
        return Err(Error::InvalidInput("histogram needs at least one bin".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::InvalidInput("scores and labels differ in length".into()));
    }
    let mut h = Histogram {
        bin_edges: (0..=n_bins).map(|i| i as f64 / n_bins as f64).collect(),
        factual_counts: vec![0; n_bins],
        hallucinated_counts: vec![0; n_bins],
    };
    for (&s, &l) in scores.iter().zip(labels) {
        let bin = ((s.clamp(0.0, 1.0) * n_bins as f64).floor() as usize).min(n_bins - 1);
        match l {
            Label::Factual => h.factual_counts[bin] += 1,
            Label::Hallucinated => h.hallucinated_counts[bin] += 1,
            Label::Unlabeled => {}
        }
    }
    Ok(h)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn report_rows(scope: &str, r: &EvalReport, rows: &mut Vec<[String; 3]>) {
    let mut push = |metric: &str, value: String| {
        rows.push([scope.to_string(), metric.to_string(), value]);
    };
    push("n", r.total().to_string());
    push("tp", r.tp.to_string());
    push("fn", r.fn_.to_string());
    push("tn", r.tn.to_string());
    push("fp", r.fp.to_string());
    push("n_unknown", r.n_unknown.to_string());
    push("bacc", fmt_opt(r.bacc));
    push("bacc_unknown", fmt_opt(r.bacc_unknown));
    match r.thresholds {
        ThresholdConfig::Single { tau } => push("tau", tau.to_string()),
        ThresholdConfig::Dual {
            alpha_low,
            alpha_high,
        } => {
            push("alpha_low", alpha_low.to_string());
            push("alpha_high", alpha_high.to_string());
        }
    }
}

/// Flat CSV: one `scope,metric,value` row per metric, overall then strata.
pub fn write_report_csv(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    let mut rows = Vec::new();
    report_rows("overall", report, &mut rows);
    for (key, sub) in report.strata.iter().flatten() {
        report_rows(&format!("length:{key}"), sub, &mut rows);
    }
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["scope", "metric", "value"])?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

pub fn write_histogram_csv(h: &Histogram, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["bin_low", "bin_high", "factual", "hallucinated"])?;
    for i in 0..h.factual_counts.len() {
        w.write_record([
            h.bin_edges[i].to_string(),
            h.bin_edges[i + 1].to_string(),
            h.factual_counts[i].to_string(),
            h.hallucinated_counts[i].to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}
