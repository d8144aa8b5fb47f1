//! Embedding construction from hidden states and a one-hidden-layer MLP
//! classifier trained on them with the base model frozen.

mod io;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::HiddenStates;

pub use io::{embed_claims, load_probe, save_probe, EmbeddingCache, ProbeMeta, WeightEncoding};
pub use train::{train_probe, EpochStats, Optimizer, TrainConfig, TrainedProbe};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingType {
    /// Final token, last layer.
    Type1,
    /// Mean over tokens, last layer.
    Type2,
    /// Final token, mean over layers.
    Type3,
    /// Elementwise mean of type1 and type2.
    Type4,
}

impl EmbeddingType {
    pub const ALL: [EmbeddingType; 4] = [
        EmbeddingType::Type1,
        EmbeddingType::Type2,
        EmbeddingType::Type3,
        EmbeddingType::Type4,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EmbeddingType::Type1 => "type1",
            EmbeddingType::Type2 => "type2",
            EmbeddingType::Type3 => "type3",
            EmbeddingType::Type4 => "type4",
        }
    }
}

impl fmt::Display for EmbeddingType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmbeddingType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EmbeddingType::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown embedding type {s:?}; valid: type1..type4")))
    }
}

fn mean_of<'a>(vectors: impl ExactSizeIterator<Item = &'a Vec<f64>>, width: usize) -> Vec<f64> {
    let n = vectors.len() as f64;
    let mut acc = vec![0.0; width];
    for v in vectors {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Builds one embedding, with type3 averaging transformer layers only.
pub fn build_embedding(h: &HiddenStates, t: EmbeddingType) -> Result<Vec<f64>> {
    build_embedding_with(h, t, false)
}

/// Like [`build_embedding`]; `include_embedding_layer` adds the
/// pre-transformer layer to the type3 average.
pub fn build_embedding_with(
    h: &HiddenStates,
    t: EmbeddingType,
    include_embedding_layer: bool,
) -> Result<Vec<f64>> {
    if h.layer_count() == 0 || h.token_count() == 0 {
        return Err(Error::InvalidInput("hidden states contain zero tokens".into()));
    }
    h.validate()?;
    let width = h.hidden_size();
    let last = h.layers.last().expect("non-empty");
    let type1 = || last.last().expect("non-empty").clone();
    let type2 = || mean_of(last.iter(), width);
    Ok(match t {
        EmbeddingType::Type1 => type1(),
        EmbeddingType::Type2 => type2(),
        EmbeddingType::Type3 => {
            let mut finals: Vec<&Vec<f64>> = Vec::with_capacity(h.layer_count() + 1);
            if include_embedding_layer {
                let emb = h.embedding_layer.as_ref().ok_or_else(|| {
                    Error::InvalidInput("embedding layer requested but not returned by the backend".into())
                })?;
                finals.push(emb.last().expect("validated"));
            }
            finals.extend(h.layers.iter().map(|l| l.last().expect("non-empty")));
            mean_of(finals.into_iter(), width)
        }
        EmbeddingType::Type4 => type1()
            .iter()
            .zip(type2())
            .map(|(a, b)| 0.5 * (a + b))
            .collect(),
    })
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of a logit against a 0/1 target, in log-sum-exp form.
pub fn bce_from_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - y * z + (-z.abs()).exp().ln_1p()
}

/// Input → ReLU hidden layer → single sigmoid output. Weights are row-major
/// (`w1[j * input_width + i]` connects input `i` to hidden unit `j`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub input_width: usize,
    pub hidden_width: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    pub seed: u64,
}

impl ProbeModel {
    pub fn zeros(input_width: usize, hidden_width: usize) -> Self {
        ProbeModel {
            input_width,
            hidden_width,
            w1: vec![0.0; input_width * hidden_width],
            b1: vec![0.0; hidden_width],
            w2: vec![0.0; hidden_width],
            b2: 0.0,
            seed: 0,
        }
    }

    /// He-uniform first layer, Glorot-uniform output layer, zero biases.
    pub fn init(input_width: usize, hidden_width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with(input_width, hidden_width, seed, &mut rng)
    }

    pub(crate) fn init_with(input_width: usize, hidden_width: usize, seed: u64, rng: &mut ChaCha8Rng) -> Self {
        let mut m = Self::zeros(input_width, hidden_width);
        m.seed = seed;
        let a1 = (6.0 / input_width.max(1) as f64).sqrt();
        m.w1.iter_mut().for_each(|w| *w = rng.random_range(-a1..a1));
        let a2 = (6.0 / (hidden_width + 1) as f64).sqrt();
        m.w2.iter_mut().for_each(|w| *w = rng.random_range(-a2..a2));
        m
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + 1
    }

    /// Parameters flattened as w1, b1, w2, b2.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        p.extend_from_slice(&self.w1);
        p.extend_from_slice(&self.b1);
        p.extend_from_slice(&self.w2);
        p.push(self.b2);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.n_params(), "parameter vector length");
        let (w1, rest) = p.split_at(self.w1.len());
        let (b1, rest) = rest.split_at(self.b1.len());
        let (w2, b2) = rest.split_at(self.w2.len());
        self.w1.copy_from_slice(w1);
        self.b1.copy_from_slice(b1);
        self.w2.copy_from_slice(w2);
        self.b2 = b2[0];
    }

    pub fn validate(&self) -> Result<()> {
        let shapes_ok = self.w1.len() == self.input_width * self.hidden_width
            && self.b1.len() == self.hidden_width
            && self.w2.len() == self.hidden_width;
        if !shapes_ok {
            return Err(Error::Probe("weight arrays do not match declared widths".into()));
        }
        if !self.params().iter().all(|p| p.is_finite()) {
            return Err(Error::Probe("model has non-finite parameters".into()));
        }
        Ok(())
    }

    fn check_width(&self, x: &[f64]) -> Result<()> {
        if x.len() == self.input_width {
            Ok(())
        } else {
            Err(Error::Probe(format!(
                "input width {} does not match model input width {}",
                x.len(),
                self.input_width
            )))
        }
    }

    /// Hidden pre-activations.
    fn hidden_pre(&self, x: &[f64]) -> Vec<f64> {
        let n = self.input_width;
        (0..self.hidden_width)
            .map(|j| {
                let row = &self.w1[j * n..(j + 1) * n];
                self.b1[j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    pub(crate) fn logit_unchecked(&self, x: &[f64]) -> f64 {
        let pre = self.hidden_pre(x);
        self.b2 + pre.iter().zip(&self.w2).map(|(a, w)| a.max(0.0) * w).sum::<f64>()
    }

    pub fn logit(&self, x: &[f64]) -> Result<f64> {
        self.check_width(x)?;
        Ok(self.logit_unchecked(x))
    }

    /// Weighted loss on one example.
    pub fn loss(&self, x: &[f64], factual: bool) -> Result<f64> {
        Ok(bce_from_logit(self.logit(x)?, if factual { 1.0 } else { 0.0 }))
    }

    /// Backpropagated gradient of the example loss, accumulated into `grad`
    /// (same layout as [`params`](Self::params)) with weight `scale`.
    pub(crate) fn accumulate_gradient(&self, x: &[f64], factual: bool, scale: f64, grad: &mut [f64]) {
        let n = self.input_width;
        let h = self.hidden_width;
        let pre = self.hidden_pre(x);
        let z = self.b2 + pre.iter().zip(&self.w2).map(|(a, w)| a.max(0.0) * w).sum::<f64>();
        let dz = scale * (sigmoid(z) - if factual { 1.0 } else { 0.0 });
        let (gw1, rest) = grad.split_at_mut(n * h);
        let (gb1, rest) = rest.split_at_mut(h);
        let (gw2, gb2) = rest.split_at_mut(h);
        gb2[0] += dz;
        for j in 0..h {
            gw2[j] += dz * pre[j].max(0.0);
            if pre[j] > 0.0 {
                let d = dz * self.w2[j];
                gb1[j] += d;
                for (g, v) in gw1[j * n..(j + 1) * n].iter_mut().zip(x) {
                    *g += d * v;
                }
            }
        }
    }

    pub fn gradient(&self, x: &[f64], factual: bool) -> Result<Vec<f64>> {
        self.check_width(x)?;
        let mut g = vec![0.0; self.n_params()];
        self.accumulate_gradient(x, factual, 1.0, &mut g);
        Ok(g)
    }
}

/// P(factual) for one embedding.
pub fn probe_score(m: &ProbeModel, v: &[f64]) -> Result<f64> {
    Ok(sigmoid(m.logit(v)?))
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Central-difference gradient of the example loss over every parameter.
pub fn numeric_gradient(m: &ProbeModel, x: &[f64], factual: bool) -> Result<Vec<f64>> {
    m.check_width(x)?;
    let base = m.params();
    let mut probe = m.clone();
    let mut p = base.clone();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        p[i] = base[i] + GRAD_CHECK_STEP;
        probe.set_params(&p);
        let up = probe.loss(x, factual)?;
        p[i] = base[i] - GRAD_CHECK_STEP;
        probe.set_params(&p);
        let down = probe.loss(x, factual)?;
        p[i] = base[i];
        out.push((up - down) / (2.0 * GRAD_CHECK_STEP));
    }
    Ok(out)
}

fn relative_error(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff == 0.0 {
        0.0
    } else {
        diff / a.abs().max(b.abs()).max(1e-7)
    }
}

/// Max relative error between backpropagation and finite differences.
pub fn gradient_check(m: &ProbeModel, x: &[f64], factual: bool) -> Result<f64> {
    gradient_check_with(m, x, factual, |m, x, y| m.gradient(x, y))
}

/// [`gradient_check`] against a caller-supplied analytic gradient.
pub fn gradient_check_with<F>(m: &ProbeModel, x: &[f64], factual: bool, analytic: F) -> Result<f64>
where
    F: Fn(&ProbeModel, &[f64], bool) -> Result<Vec<f64>>,
{
    let a = analytic(m, x, factual)?;
    let n = numeric_gradient(m, x, factual)?;
    if a.len() != n.len() {
        return Err(Error::Probe("analytic gradient has the wrong length".into()));
    }
    Ok(a.iter().zip(&n).map(|(a, b)| relative_error(*a, *b)).fold(0.0, f64::max))
}
