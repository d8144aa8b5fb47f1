use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{bce_from_logit, sigmoid, ProbeModel};
use crate::error::{Error, Result};
use crate::eval::{classify, Confusion};
use crate::model::Label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden_width: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Epochs without validation improvement before stopping; `None` trains all epochs.
    pub patience: Option<usize>,
    /// Inverse-frequency class weights in the loss.
    pub class_weighting: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden_width: 256,
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 32,
            seed: 0,
            optimizer: Optimizer::Adam,
            patience: Some(5),
            class_weighting: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidInput("learning rate must be > 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.hidden_width == 0 {
            return Err(Error::InvalidInput(
                "epochs, batch size and hidden width must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean unweighted loss over the full training set after the epoch.
    pub train_loss: f64,
    pub selection_bacc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedProbe {
    pub model: ProbeModel,
    /// 1-based epoch of the returned checkpoint.
    pub best_epoch: usize,
    /// BAcc at threshold 0.5 on the selection set for the returned checkpoint.
    pub best_bacc: f64,
    /// True when checkpoints were chosen on the training set.
    pub selected_on_train: bool,
    pub history: Vec<EpochStats>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

fn to_targets(examples: &[(Vec<f64>, Label)], what: &str) -> Result<Vec<bool>> {
    examples
        .iter()
        .map(|(_, l)| match l {
            Label::Factual => Ok(true),
            Label::Hallucinated => Ok(false),
            Label::Unlabeled => Err(Error::InvalidInput(format!("{what} set contains an unlabeled example"))),
        })
        .collect()
}

fn selection_bacc(m: &ProbeModel, examples: &[(Vec<f64>, Label)]) -> f64 {
    let preds: Vec<_> = examples
        .iter()
        .map(|(x, _)| classify(sigmoid(m.logit_unchecked(x)), 0.5))
        .collect();
    let labels: Vec<Label> = examples.iter().map(|(_, l)| *l).collect();
    Confusion::from_predictions(&preds, &labels)
        .ok()
        .and_then(|c| c.bacc())
        .unwrap_or(0.0)
}

fn mean_loss(m: &ProbeModel, xs: &[(Vec<f64>, Label)], ys: &[bool]) -> f64 {
    let total: f64 = xs
        .iter()
        .zip(ys)
        .map(|((x, _), y)| bce_from_logit(m.logit_unchecked(x), if *y { 1.0 } else { 0.0 }))
        .sum();
    total / xs.len() as f64
}

/// Mini-batch training with seeded init and shuffling. Returns the epoch
/// checkpoint with the best BAcc (threshold 0.5) on `validation`, or on the
/// training set when `validation` is empty or single-class. Ties keep the
/// earliest epoch.
pub fn train_probe(
    train: &[(Vec<f64>, Label)],
    validation: &[(Vec<f64>, Label)],
    cfg: &TrainConfig,
) -> Result<TrainedProbe> {
    cfg.validate()?;
    let ys = to_targets(train, "training")?;
    if !(ys.contains(&true) && ys.contains(&false)) {
        return Err(Error::InvalidInput(
            "training data must contain both factual and hallucinated examples".into(),
        ));
    }
    let width = train[0].0.len();
    if width == 0 {
        return Err(Error::InvalidInput("embeddings have zero width".into()));
    }
    if let Some((x, _)) = train.iter().chain(validation).find(|(x, _)| x.len() != width) {
        return Err(Error::Probe(format!(
            "embedding width {} differs from {width}",
            x.len()
        )));
    }
    let val_targets = to_targets(validation, "validation")?;
    let selected_on_train = !(val_targets.contains(&true) && val_targets.contains(&false));
    if selected_on_train && !validation.is_empty() {
        log::warn!("validation set has a single class; selecting checkpoints on training BAcc");
    }
    let selection = if selected_on_train { train } else { validation };

    let n_pos = ys.iter().filter(|y| **y).count() as f64;
    let n = ys.len() as f64;
    let weight = |y: bool| {
        if !cfg.class_weighting {
            1.0
        } else if y {
            n / (2.0 * n_pos)
        } else {
            n / (2.0 * (n - n_pos))
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = ProbeModel::init_with(width, cfg.hidden_width, cfg.seed, &mut rng);
    let n_params = model.n_params();
    let mut params = model.params();
    let mut adam = Adam {
        m: vec![0.0; n_params],
        v: vec![0.0; n_params],
        t: 0,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut grad = vec![0.0; n_params];
    let mut best: Option<(ProbeModel, usize, f64)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut since_best = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                model.accumulate_gradient(&train[i].0, ys[i], scale * weight(ys[i]), &mut grad);
            }
            match cfg.optimizer {
                Optimizer::Sgd => params
                    .iter_mut()
                    .zip(&grad)
                    .for_each(|(p, g)| *p -= cfg.learning_rate * g),
                Optimizer::Adam => adam.step(&mut params, &grad, cfg.learning_rate),
            }
            model.set_params(&params);
        }
        if !params.iter().all(|p| p.is_finite()) {
            return Err(Error::Probe(format!(
                "training diverged at epoch {epoch}; lower the learning rate"
            )));
        }
        let score = selection_bacc(&model, selection);
        history.push(EpochStats {
            epoch,
            train_loss: mean_loss(&model, train, &ys),
            selection_bacc: score,
        });
        if best.as_ref().is_none_or(|(_, _, b)| score > *b) {
            best = Some((model.clone(), epoch, score));
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience.is_some_and(|p| since_best >= p) {
                log::debug!("early stop at epoch {epoch}");
                break;
            }
        }
    }
    let (model, best_epoch, best_bacc) = best.expect("at least one epoch");
    Ok(TrainedProbe {
        model,
        best_epoch,
        best_bacc,
        selected_on_train,
        history,
    })
}
