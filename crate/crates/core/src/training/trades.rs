use serde::{Deserialize, Serialize};

use super::{fit, Example, SampleGrad, TrainConfig, TrainReport};
use crate::error::{Error, Result};
use crate::snn::{
    argmax, cross_entropy, cross_entropy_grad, kl_divergence, kl_divergence_grads, Classifier, ForwardOptions,
    Gradients, Network, Tape,
};
use crate::tensor::{sign, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TradesConfig {
    pub beta_rob: f64,
    pub eps: f64,
    pub n_pgd: usize,
    /// Defaults to `2.5 * eps / n_pgd`.
    #[serde(default)]
    pub step_size: Option<f64>,
}

impl Default for TradesConfig {
    fn default() -> Self {
        TradesConfig { beta_rob: 0.05, eps: 0.5, n_pgd: 5, step_size: None }
    }
}

impl TradesConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_rob >= 0.0) {
            return Err(Error::Config("beta_rob must be non-negative".into()));
        }
        if !(self.eps > 0.0 && self.eps <= 1.0) {
            return Err(Error::Config("eps must lie in (0, 1]".into()));
        }
        if self.n_pgd == 0 {
            return Err(Error::Config("n_pgd must be at least 1".into()));
        }
        Ok(())
    }

    pub fn step_size(&self) -> f64 {
        self.step_size.unwrap_or(2.5 * self.eps / self.n_pgd as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PgdOutput {
    pub continuous: Tensor,
    pub rounded: Tensor,
}

/// L∞ PGD on cross-entropy with straight-through rounding: gradients are
/// taken at `round(x_cont)` and applied to the continuous copy, which is
/// then projected onto `|x_cont - x| <= eps` intersected with `[0, 1]`.
pub fn pgd_linf<C: Classifier + ?Sized>(
    net: &C,
    x: &Tensor,
    label: usize,
    eps: f64,
    n_steps: usize,
    step_size: f64,
) -> Result<PgdOutput> {
    let mut cont = x.clone();
    for _ in 0..n_steps {
        let rounded = cont.map(f64::round);
        let (_, grads) = net.input_gradients(&rounded, &mut |logits| vec![cross_entropy_grad(logits, label)])?;
        let g = &grads[0];
        for ((c, &g), &x0) in cont.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
            let moved = *c + step_size * sign(g);
            *c = project(moved, x0, eps);
        }
    }
    let rounded = cont.map(f64::round);
    Ok(PgdOutput { continuous: cont, rounded })
}

/// Clamp onto `|c - x0| <= eps` and `[0, 1]`. `x0 - eps` can round to a
/// point just outside the ball, so step back an ulp until the budget holds.
fn project(c: f64, x0: f64, eps: f64) -> f64 {
    let mut c = c.clamp(x0 - eps, x0 + eps).clamp(0.0, 1.0);
    while (c - x0).abs() > eps {
        c = if c < x0 { c.next_up() } else { c.next_down() };
    }
    c
}

#[derive(Debug, Clone)]
pub struct TradesStep {
    pub loss: f64,
    pub cross_entropy: f64,
    /// `(1 / B) * sum of KL(f(x_adv) || f(x_0))` over the batch.
    pub kl: f64,
    pub grads: Gradients,
}

struct TradesSample {
    ce: f64,
    kl: f64,
    grads: Gradients,
    correct: bool,
    clean_tape: Tape,
}

/// With `with_kl` false the adversarial term is skipped entirely, which only
/// matches the full objective when `beta_rob` is zero.
fn trades_sample(net: &Network, ex: &Example, cfg: &TradesConfig, with_kl: bool) -> Result<TradesSample> {
    let clean = net.forward(&ex.input, ForwardOptions::recording())?;
    if !with_kl {
        let clean_tape = clean.tape.expect("recorded");
        let (_, g) = net.backward(&clean_tape, &cross_entropy_grad(&clean.logits, ex.label), true)?;
        return Ok(TradesSample {
            ce: cross_entropy(&clean.logits, ex.label),
            kl: 0.0,
            grads: g.expect("requested"),
            correct: argmax(&clean.logits) == ex.label,
            clean_tape,
        });
    }
    let adv_input = pgd_linf(net, &ex.input, ex.label, cfg.eps, cfg.n_pgd, cfg.step_size())?.rounded;
    let adv = net.forward(&adv_input, ForwardOptions::recording())?;
    let ce = cross_entropy(&clean.logits, ex.label);
    let kl = kl_divergence(&adv.logits, &clean.logits);
    if !kl.is_finite() {
        return Err(Error::Numeric(format!("non-finite KL divergence {kl}")));
    }
    let (g_adv, g_clean) = kl_divergence_grads(&adv.logits, &clean.logits);
    let clean_up: Vec<f64> =
        cross_entropy_grad(&clean.logits, ex.label).iter().zip(&g_clean).map(|(c, k)| c + cfg.beta_rob * k).collect();
    let adv_up: Vec<f64> = g_adv.iter().map(|k| cfg.beta_rob * k).collect();
    let clean_tape = clean.tape.expect("recorded");
    let (_, g1) = net.backward(&clean_tape, &clean_up, true)?;
    let (_, g2) = net.backward(adv.tape.as_ref().expect("recorded"), &adv_up, true)?;
    let mut grads = g1.expect("requested");
    grads.add_scaled(&g2.expect("requested"), 1.0);
    Ok(TradesSample { ce, kl, grads, correct: argmax(&clean.logits) == ex.label, clean_tape })
}

/// TRADES objective on a batch:
/// `mean CE(f(x_0), y) + (beta_rob / B) * sum KL(f(x_adv) || f(x_0))`,
/// with `x_adv` the rounded output of [`pgd_linf`] and softmax over the
/// spike counts as the output distribution.
pub fn trades_step(net: &Network, batch: &[Example], cfg: &TradesConfig) -> Result<TradesStep> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    let b = batch.len() as f64;
    let mut grads = Gradients::zeros_like(net);
    let mut ce_sum = 0.0;
    let mut kl_sum = 0.0;
    for ex in batch {
        let r = trades_sample(net, ex, cfg, true)?;
        ce_sum += r.ce;
        kl_sum += r.kl;
        grads.add_scaled(&r.grads, 1.0);
    }
    grads.scale(1.0 / b);
    let cross_entropy = ce_sum / b;
    let kl = kl_sum / b;
    Ok(TradesStep { loss: cross_entropy + cfg.beta_rob * kl, cross_entropy, kl, grads })
}

/// [`fit`] with the TRADES objective. The PGD inner attack omits the
/// greedy-flip finalisation used by the evaluation attacks.
pub fn train_trades(
    net: &Network,
    train: &[Example],
    test: Option<&[Example]>,
    train_cfg: &TrainConfig,
    trades: &TradesConfig,
) -> Result<(Network, TrainReport)> {
    trades.validate()?;
    // A zero weight makes the adversarial pass dead work.
    let with_kl = trades.beta_rob != 0.0;
    fit(net, train, test, train_cfg, |n, ex| {
        let r = trades_sample(n, ex, trades, with_kl)?;
        Ok(SampleGrad {
            loss: r.ce + trades.beta_rob * r.kl,
            grads: r.grads,
            correct: r.correct,
            tapes: vec![r.clean_tape],
        })
    })
}
