use claimcheck::probe::{
    gradient_check, gradient_check_with, numeric_gradient, train_probe, Optimizer, ProbeModel, TrainConfig,
};
use claimcheck::Label;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 200 points in [-3,3]^2 split by x + y = 0 with a gap of 1.0 between classes.
fn separable_set(seed: u64) -> Vec<(Vec<f64>, Label)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    while out.len() < 200 {
        let x: f64 = rng.random_range(-3.0..3.0);
        let y: f64 = rng.random_range(-3.0..3.0);
        let d = (x + y) / 2f64.sqrt();
        if d.abs() >= 0.5 {
            out.push((vec![x, y], if d > 0.0 { Label::Factual } else { Label::Hallucinated }));
        }
    }
    out
}

fn train_accuracy(m: &ProbeModel, data: &[(Vec<f64>, Label)]) -> f64 {
    let correct = data
        .iter()
        .filter(|(x, l)| (claimcheck::probe::probe_score(m, x).unwrap() > 0.5) == (*l == Label::Factual))
        .count();
    correct as f64 / data.len() as f64
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..20 {
        let m = ProbeModel::init(4, 8, seed);
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = gradient_check(&m, &x, rng.random_bool(0.5)).unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn confident_correct_prediction_has_vanishing_gradient() {
    let mut m = ProbeModel::init(4, 8, 1);
    m.b2 = 40.0;
    let x = [0.1, -0.2, 0.3, 0.4];
    let a = m.gradient(&x, true).unwrap();
    let n = numeric_gradient(&m, &x, true).unwrap();
    assert!(a.iter().all(|g| g.abs() < 1e-6));
    assert!(n.iter().all(|g| g.abs() < 1e-6));
}

#[test]
fn corrupted_backprop_is_caught() {
    let m = ProbeModel::init(4, 8, 5);
    let x = [0.5, -0.3, 0.8, 0.1];
    let err = gradient_check_with(&m, &x, false, |m, x, y| {
        let mut g = m.gradient(x, y)?;
        // first-layer gradient off by a factor of two
        let n = m.input_width * m.hidden_width;
        g[..n].iter_mut().for_each(|v| *v *= 2.0);
        Ok(g)
    })
    .unwrap();
    assert!(err > 1e-2, "{err}");
}

#[test]
fn separable_set_fits_perfectly_with_defaults() {
    let data = separable_set(42);
    let cfg = TrainConfig { epochs: 200, patience: None, ..Default::default() };
    let t = train_probe(&data, &[], &cfg).unwrap();
    assert_eq!(train_accuracy(&t.model, &data), 1.0);
    assert_eq!(t.best_bacc, 1.0);
}

#[test]
fn training_is_bitwise_deterministic() {
    let data = separable_set(3);
    let cfg = TrainConfig { hidden_width: 32, epochs: 10, seed: 9, ..Default::default() };
    let a = train_probe(&data, &data[..50], &cfg).unwrap();
    let b = train_probe(&data, &data[..50], &cfg).unwrap();
    let bits = |m: &ProbeModel| m.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.model), bits(&b.model));
    let c = train_probe(&data, &data[..50], &TrainConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(bits(&a.model), bits(&c.model));
}

#[test]
fn full_batch_gradient_descent_loss_is_non_increasing() {
    let data = separable_set(42);
    let cfg = TrainConfig {
        hidden_width: 64,
        learning_rate: 1e-3,
        epochs: 100,
        batch_size: data.len(),
        optimizer: Optimizer::Sgd,
        patience: None,
        ..Default::default()
    };
    let t = train_probe(&data, &[], &cfg).unwrap();
    for w in t.history.windows(2) {
        assert!(w[1].train_loss <= w[0].train_loss, "{} -> {}", w[0].train_loss, w[1].train_loss);
    }
}
