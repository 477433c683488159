use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_label, normalized_step, AttackResult, Run};
use crate::error::{Error, Result};
use crate::snn::{cross_entropy_grad, Classifier};
use crate::tensor::Tensor;

/// Flip candidates tried by the finalisation, largest score first.
pub const DEFAULT_MAX_FLIPS: usize = 2000;
const PROB_INIT_CLIP: f64 = 0.05;
const PROB_DELTA: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CdPgdConfig {
    pub n_steps: usize,
    pub step_size: f64,
    pub max_flips: usize,
}

impl Default for CdPgdConfig {
    fn default() -> Self {
        CdPgdConfig { n_steps: 50, step_size: 0.1, max_flips: DEFAULT_MAX_FLIPS }
    }
}

impl CdPgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) {
            return Err(Error::Config("step_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbPgdConfig {
    pub temperature: f64,
    pub n_mc: usize,
    pub n_steps: usize,
    pub step_size: f64,
    pub max_flips: usize,
}

impl Default for ProbPgdConfig {
    fn default() -> Self {
        ProbPgdConfig { temperature: 0.01, n_mc: 10, n_steps: 50, step_size: 0.1, max_flips: DEFAULT_MAX_FLIPS }
    }
}

impl ProbPgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.n_mc == 0 {
            return Err(Error::Config("n_mc must be at least 1".into()));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::Config("step_size must be positive".into()));
        }
        Ok(())
    }
}

fn ensure_binary(x: &Tensor) -> Result<()> {
    if x.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Validation("attack input must be binary".into()));
    }
    Ok(())
}

/// Starting from `x`, flips coordinates with positive score in decreasing
/// score order (at most `max_flips`), querying after each flip and stopping
/// at the first misclassification. Returns the last raster and its label.
pub fn greedy_flip<C: Classifier + ?Sized>(
    net: &C,
    x: &Tensor,
    label: usize,
    scores: &[f64],
    max_flips: usize,
) -> Result<(Tensor, usize, usize)> {
    let mut run = Run::new(net);
    let (x_adv, adv) = flip_run(&mut run, x, label, scores, max_flips)?;
    Ok((x_adv, adv, run.queries))
}

fn flip_run<C: Classifier + ?Sized>(
    run: &mut Run<'_, C>,
    x: &Tensor,
    label: usize,
    scores: &[f64],
    max_flips: usize,
) -> Result<(Tensor, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] > 0.0).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.truncate(max_flips);
    let mut x_adv = x.clone();
    for i in order {
        let v = &mut x_adv.data_mut()[i];
        *v = 1.0 - *v;
        let adv = run.label(&x_adv)?;
        if adv != label {
            return Ok((x_adv, adv));
        }
    }
    Ok((x_adv, label))
}

fn ce_input_gradient<C: Classifier + ?Sized>(
    run: &mut Run<'_, C>,
    x: &Tensor,
    label: usize,
) -> Result<(Vec<f64>, Tensor)> {
    let (logits, mut grads) = run.gradients(x, &mut |l| vec![cross_entropy_grad(l, label)])?;
    Ok((logits, grads.pop().expect("one upstream")))
}

/// Straight-through PGD on a continuous copy, finalised by greedy bit
/// flips in order of `|x_cont - x|`.
pub fn cd_pgd<C: Classifier + ?Sized>(net: &C, x: &Tensor, label: usize, cfg: &CdPgdConfig) -> Result<AttackResult> {
    cfg.validate()?;
    check_label(net, label)?;
    ensure_binary(x)?;
    let mut run = Run::new(net);
    let entry = run.label(x)?;
    if entry != label {
        return Ok(run.finish(x, x.clone(), label, entry, None));
    }
    let mut cont = x.clone();
    for _ in 0..cfg.n_steps {
        let (_, g) = ce_input_gradient(&mut run, &cont.map(f64::round), label)?;
        normalized_step(&mut cont, &g, cfg.step_size, 0.0, 1.0);
    }
    let scores: Vec<f64> = cont.data().iter().zip(x.data()).map(|(c, v)| (c - v).abs()).collect();
    let (x_adv, adv) = flip_run(&mut run, x, label, &scores, cfg.max_flips)?;
    Ok(run.finish(x, x_adv, label, adv, None))
}

/// One binary-concrete sample `sigmoid((logit(r) + logit(p)) / T)` with
/// `r ~ U(0, 1)`, and its derivative with respect to `p`.
pub fn sample_binary_concrete(p: &Tensor, temperature: f64, rng: &mut impl Rng) -> (Tensor, Tensor) {
    let mut sample = Vec::with_capacity(p.len());
    let mut deriv = Vec::with_capacity(p.len());
    for &pi in p.data() {
        let r: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        let z = ((r / (1.0 - r)).ln() + (pi / (1.0 - pi)).ln()) / temperature;
        let s = if z >= 0.0 {
            1.0 / (1.0 + (-z).exp())
        } else {
            let e = z.exp();
            e / (1.0 + e)
        };
        sample.push(s);
        deriv.push(s * (1.0 - s) / (temperature * pi * (1.0 - pi)));
    }
    (Tensor::from_vec(p.shape(), sample).expect("same shape"), Tensor::from_vec(p.shape(), deriv).expect("same shape"))
}

/// Monte-Carlo estimate of the gradient of the expected cross-entropy with
/// respect to the spike probabilities, averaged over `n_mc` samples.
pub fn prob_pgd_gradient<C: Classifier + ?Sized>(
    net: &C,
    p: &Tensor,
    label: usize,
    temperature: f64,
    n_mc: usize,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let mut run = Run::new(net);
    mc_gradient(&mut run, p, label, temperature, n_mc, rng)
}

fn mc_gradient<C: Classifier + ?Sized>(
    run: &mut Run<'_, C>,
    p: &Tensor,
    label: usize,
    temperature: f64,
    n_mc: usize,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let mut total = Tensor::zeros(p.shape());
    for _ in 0..n_mc {
        let (sample, deriv) = sample_binary_concrete(p, temperature, rng);
        let (_, g) = ce_input_gradient(run, &sample, label)?;
        total.add_scaled(&g.zip_map(&deriv, |a, b| a * b), 1.0);
    }
    Ok(total.map(|v| v / n_mc as f64))
}

/// PGD on Bernoulli spike probabilities with reparameterised sampling,
/// finalised by greedy flips in order of how far each probability has
/// moved towards flipping.
pub fn prob_pgd<C: Classifier + ?Sized>(
    net: &C,
    x: &Tensor,
    label: usize,
    cfg: &ProbPgdConfig,
    seed: u64,
) -> Result<AttackResult> {
    cfg.validate()?;
    check_label(net, label)?;
    ensure_binary(x)?;
    let mut run = Run::new(net);
    let entry = run.label(x)?;
    if entry != label {
        return Ok(run.finish(x, x.clone(), label, entry, None));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = x.map(|v| v.clamp(PROB_INIT_CLIP, 1.0 - PROB_INIT_CLIP));
    let mut p = init.clone();
    for _ in 0..cfg.n_steps {
        let g = mc_gradient(&mut run, &p, label, cfg.temperature, cfg.n_mc, &mut rng)?;
        normalized_step(&mut p, &g, cfg.step_size, PROB_DELTA, 1.0 - PROB_DELTA);
    }
    // Progress of each probability away from its start, towards the flip.
    let scores: Vec<f64> = p
        .data()
        .iter()
        .zip(init.data())
        .zip(x.data())
        .map(|((pi, p0), &v)| if v == 1.0 { p0 - pi } else { pi - p0 })
        .collect();
    let (x_adv, adv) = flip_run(&mut run, x, label, &scores, cfg.max_flips)?;
    Ok(run.finish(x, x_adv, label, adv, None))
}
