use serde::{Deserialize, Serialize};

use super::check_label;
use crate::error::{Error, Result};
use crate::snn::{argmax, Classifier};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeepFoolConfig {
    /// Lower bound on the norm of every step.
    pub eta: f64,
    pub max_iters: usize,
    /// Each step is scaled by `1 + overshoot` before the `eta` clamp.
    pub overshoot: f64,
    /// Evaluate the network at `round(clamp(x, l, u))` while stepping the
    /// continuous iterate.
    #[serde(default)]
    pub straight_through: Option<(f64, f64)>,
}

impl Default for DeepFoolConfig {
    fn default() -> Self {
        DeepFoolConfig { eta: 0.0, max_iters: 50, overshoot: 0.02, straight_through: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepFoolOutput {
    /// Last iterate.
    pub x_boundary: Tensor,
    /// `grad f_k - grad f_label` for the new label once the iterate is
    /// misclassified, otherwise (or if that difference vanishes) for the
    /// last competitor stepped towards.
    pub normal: Tensor,
    pub success: bool,
    pub adversarial_label: usize,
    pub iterations: usize,
    pub queries: usize,
    /// `|f_k| / ||w_k||` of the first step, before overshoot and clamp.
    pub first_step_norm: Option<f64>,
}

/// Multiclass DeepFool with a minimum step norm. `label` is the class to
/// move away from; an input the network already assigns elsewhere is
/// returned unchanged.
pub fn deepfool<C: Classifier + ?Sized>(
    net: &C,
    x: &Tensor,
    label: usize,
    cfg: &DeepFoolConfig,
) -> Result<DeepFoolOutput> {
    check_label(net, label)?;
    let n = net.n_classes();
    let mut xi = x.clone();
    let mut normal = Tensor::zeros(x.shape());
    let mut first_step_norm = None;
    let mut iterations = 0;
    let mut queries = 0;
    loop {
        let eval = match cfg.straight_through {
            Some((l, u)) => xi.map(|v| v.clamp(l, u).round()),
            None => xi.clone(),
        };
        let (logits, grads) = net.input_gradients(&eval, &mut |_| {
            (0..n)
                .map(|k| {
                    let mut e = vec![0.0; n];
                    e[k] = 1.0;
                    e
                })
                .collect()
        })?;
        queries += 1;
        let current = argmax(&logits);
        if current != label {
            let crossing = grads[current].zip_map(&grads[label], |a, b| a - b);
            if crossing.max_abs() > 0.0 {
                normal = crossing;
            }
            return Ok(DeepFoolOutput {
                x_boundary: xi,
                normal,
                success: true,
                adversarial_label: current,
                iterations,
                queries,
                first_step_norm,
            });
        }
        if iterations == cfg.max_iters {
            break;
        }

        let mut best: Option<(f64, f64, Tensor, f64)> = None;
        for k in (0..n).filter(|&k| k != label) {
            let w = grads[k].zip_map(&grads[label], |a, b| a - b);
            let w_norm = w.norm_l2();
            if w_norm == 0.0 {
                continue;
            }
            let f = logits[k] - logits[label];
            let dist = f.abs() / w_norm;
            if best.as_ref().is_none_or(|b| dist < b.0) {
                best = Some((dist, f, w, w_norm));
            }
        }
        let Some((dist, f, w, w_norm)) = best else {
            return Err(Error::DegenerateGradient(format!(
                "all class-difference gradients vanish at iteration {iterations}"
            )));
        };
        first_step_norm.get_or_insert(dist);
        let mut scale = (1.0 + cfg.overshoot) * f.abs() / (w_norm * w_norm);
        if scale * w_norm < cfg.eta {
            scale = cfg.eta / w_norm;
        }
        xi.add_scaled(&w, scale);
        normal = w;
        iterations += 1;
    }
    Ok(DeepFoolOutput {
        x_boundary: xi,
        normal,
        success: false,
        adversarial_label: label,
        iterations,
        queries,
        first_step_norm,
    })
}
