/// Entropy of one position's next-token distribution from the returned top-N
/// candidate log-probabilities.
///
/// Candidate probabilities cover mass `m <= 1`. With a known vocabulary size,
/// the uncovered mass is spread uniformly over the remaining `V - N` tokens
/// and contributes `-(1-m) ln((1-m)/(V-N))`. Without it, the result is the
/// truncated entropy and the second return value is `true` when mass is
/// missing.
pub fn truncated_entropy(candidate_logprobs: &[f64], vocab_size: Option<usize>) -> (f64, bool) {
    let mut probs: Vec<f64> = candidate_logprobs.iter().map(|lp| lp.exp()).collect();
    let mut mass: f64 = probs.iter().sum();
    if mass > 1.0 {
        // rounding in the service can push the sum slightly above one
        for p in &mut probs {
            *p /= mass;
        }
        mass = 1.0;
    }
    let mut h: f64 = probs.iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum();
    let rest = 1.0 - mass;
    let missing = rest > 1e-12;
    match vocab_size {
        Some(v) if missing && v > probs.len() => {
            let v_rest = (v - probs.len()) as f64;
            h += -rest * (rest / v_rest).ln();
            (h.max(0.0), false)
        }
        Some(_) => (h.max(0.0), false),
        None => (h.max(0.0), missing),
    }
}
