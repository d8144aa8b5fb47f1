//! Helpers and brute-force oracles shared by the CLI and acceptance tests.
//! The oracles deliberately avoid the library's search code: they classify
//! every score directly and compare metrics as exact fractions.

#![allow(dead_code)]

use std::cmp::Ordering;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use claimcheck::Label;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn claimcheck(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_claimcheck"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("spawn claimcheck")
}

pub fn run_ok(args: &[&str]) -> String {
    let out = claimcheck(args);
    assert!(
        out.status.success(),
        "claimcheck {args:?} failed ({:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

/// Exact fraction with positive denominator.
#[derive(Debug, Clone, Copy)]
pub struct Frac {
    pub num: u128,
    pub den: u128,
}

impl Frac {
    pub fn new(num: u128, den: u128) -> Self {
        assert!(den > 0);
        let g = gcd(num, den);
        Frac { num: num / g, den: den / g }
    }
    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl PartialEq for Frac {
    fn eq(&self, o: &Self) -> bool {
        self.num * o.den == o.num * self.den
    }
}

impl PartialOrd for Frac {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some((self.num * o.den).cmp(&(o.num * self.den)))
    }
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a.max(1)
    } else {
        gcd(b, a % b)
    }
}

/// Naive predictions: 1 factual, 0 hallucinated, None unknown.
pub type Pred = Option<bool>;

/// Balanced accuracy as a fraction; `unknown_correct` decides how unknown
/// predictions are counted (excluded from decided BAcc otherwise).
pub fn naive_bacc(preds: &[Pred], labels: &[Label], unknown_correct: bool) -> Option<Frac> {
    let mut pos = (0u128, 0u128); // (correct, total)
    let mut neg = (0u128, 0u128);
    for (pr, l) in preds.iter().zip(labels) {
        let class = match l {
            Label::Factual => &mut pos,
            Label::Hallucinated => &mut neg,
            Label::Unlabeled => panic!("unlabeled"),
        };
        match pr {
            None if unknown_correct => {
                class.0 += 1;
                class.1 += 1;
            }
            None => {}
            Some(f) => {
                class.1 += 1;
                if *f == (*l == Label::Factual) {
                    class.0 += 1;
                }
            }
        }
    }
    if pos.1 == 0 || neg.1 == 0 {
        return None;
    }
    // ½(a/P + b/N) = (aN + bP) / 2PN
    Some(Frac::new(pos.0 * neg.1 + neg.0 * pos.1, 2 * pos.1 * neg.1))
}

pub fn predict_single(scores: &[f64], tau: f64) -> Vec<Pred> {
    scores.iter().map(|s| Some(*s > tau)).collect()
}

pub fn predict_dual(scores: &[f64], low: f64, high: f64) -> Vec<Pred> {
    scores
        .iter()
        .map(|s| {
            if *s > high {
                Some(true)
            } else if *s < low {
                Some(false)
            } else {
                None
            }
        })
        .collect()
}

/// Best BAcc over τ = i/10000, i = 0..=10000.
pub fn grid_single(scores: &[f64], labels: &[Label]) -> Frac {
    (0..=10_000)
        .map(|i| naive_bacc(&predict_single(scores, i as f64 / 10_000.0), labels, false).unwrap())
        .fold(Frac::new(0, 1), |a, b| if b > a { b } else { a })
}

/// Candidate set built independently: sorted distinct scores, midpoints,
/// and one point 1e-6 outside [min(0, lo), max(1, hi)] on each side.
pub fn oracle_candidates(scores: &[f64]) -> Vec<f64> {
    let mut s: Vec<f64> = scores.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    s.dedup();
    let mut c = vec![s[0].min(0.0) - 1e-6];
    for i in 1..s.len() {
        c.push((s[i - 1] + s[i]) / 2.0);
    }
    c.push(s[s.len() - 1].max(1.0) + 1e-6);
    c
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairResult {
    pub alpha_low: f64,
    pub alpha_high: f64,
    pub bacc_unknown: f64,
    pub n_unknown: usize,
}

/// Exhaustive search over candidate pairs by direct classification.
/// `None` when no pair has decided-claim BAcc above `min_bacc`.
pub fn pair_oracle(scores: &[f64], labels: &[Label], min_bacc: f64) -> Option<PairResult> {
    let c = oracle_candidates(scores);
    let mut best: Option<(Frac, usize, f64, f64, f64)> = None;
    for i in 0..c.len() {
        for j in i..c.len() {
            let preds = predict_dual(scores, c[i], c[j]);
            let Some(decided) = naive_bacc(&preds, labels, false) else { continue };
            if !(decided.value() > min_bacc) {
                continue;
            }
            let bu = naive_bacc(&preds, labels, true).unwrap();
            let unknown = preds.iter().filter(|p| p.is_none()).count();
            let width = c[j] - c[i];
            let better = match &best {
                None => true,
                Some((b, u, w, lo, _)) => {
                    bu > *b
                        || (bu == *b && unknown < *u)
                        || (bu == *b && unknown == *u && width < *w)
                        || (bu == *b && unknown == *u && width == *w && c[i] < *lo)
                }
            };
            if better {
                best = Some((bu, unknown, width, c[i], c[j]));
            }
        }
    }
    best.map(|(bu, u, _, lo, hi)| PairResult {
        alpha_low: lo,
        alpha_high: hi,
        bacc_unknown: bu.value(),
        n_unknown: u,
    })
}
