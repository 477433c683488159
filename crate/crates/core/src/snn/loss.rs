//! Decoding and softmax-based losses over class scores.

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate().skip(1) {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

/// `(scores, argmax label)`.
pub fn logits_and_label(scores: Vec<f64>) -> (Vec<f64>, usize) {
    let label = argmax(&scores);
    (scores, label)
}

pub fn log_softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = scores.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    scores.iter().map(|v| v - lse).collect()
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    log_softmax(scores).into_iter().map(f64::exp).collect()
}

pub fn cross_entropy(scores: &[f64], label: usize) -> f64 {
    -log_softmax(scores)[label]
}

/// Gradient of [`cross_entropy`] with respect to the scores.
pub fn cross_entropy_grad(scores: &[f64], label: usize) -> Vec<f64> {
    let mut g = softmax(scores);
    g[label] -= 1.0;
    g
}

/// Gradient of `log_softmax(scores)[target]` with respect to the scores.
pub fn log_softmax_grad(scores: &[f64], target: usize) -> Vec<f64> {
    let mut g: Vec<f64> = softmax(scores).into_iter().map(|p| -p).collect();
    g[target] += 1.0;
    g
}

/// `KL(softmax(p_scores) || softmax(q_scores))`.
pub fn kl_divergence(p_scores: &[f64], q_scores: &[f64]) -> f64 {
    let lp = log_softmax(p_scores);
    let lq = log_softmax(q_scores);
    lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum()
}

/// Gradients of [`kl_divergence`] with respect to `p_scores` and `q_scores`.
pub fn kl_divergence_grads(p_scores: &[f64], q_scores: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let lp = log_softmax(p_scores);
    let lq = log_softmax(q_scores);
    let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
    let gp = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b - kl)).collect();
    let gq = lp.iter().zip(&lq).map(|(a, b)| b.exp() - a.exp()).collect();
    (gp, gq)
}
