//! Training procedures: surrogate-gradient BPTT, analog training with
//! weight transfer to a spiking network, 8-bit quantisation and TRADES
//! adversarial training.

mod optim;
mod quantize;
mod trades;
mod transfer;

pub use optim::{Adam, AdamConfig};
pub use quantize::{quantize_tensor, quantize_weights};
pub use trades::{pgd_linf, trades_step, train_trades, PgdOutput, TradesConfig, TradesStep};
pub use transfer::{percentile, transfer_weights, TransferReport};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_data::{Dataset, Raster};
use crate::snn::{argmax, cross_entropy, cross_entropy_grad, ForwardOptions, Gradients, Layer, Network, Tape};
use crate::tensor::Tensor;

/// One network input with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Tensor,
    pub label: usize,
}

/// Rasters as spiking-network inputs.
pub fn raster_examples(data: &Dataset) -> Vec<Example> {
    data.samples.iter().map(|s| Example { input: s.raster.to_tensor(), label: s.label }).collect()
}

/// Time-summed frames divided by the number of bins, shaped `[1, P, H, W]`
/// for analog networks.
pub fn rate_frame_examples(data: &Dataset) -> Vec<Example> {
    data.samples
        .iter()
        .map(|s| {
            let frame = accumulate_frames(&s.raster);
            let t = s.raster.n_bins() as f64;
            let mut shape = vec![1];
            shape.extend_from_slice(frame.shape());
            Example {
                input: Tensor::from_vec(&shape, frame.data().iter().map(|v| v / t).collect()).expect("same length"),
                label: s.label,
            }
        })
        .collect()
}

/// Sum over the time axis: `[T, P, H, W]` to `[P, H, W]`.
pub fn accumulate_frames(raster: &Raster) -> Tensor {
    let [t, p, h, w] = raster.shape();
    let frame = p * h * w;
    let mut out = vec![0.0; frame];
    for b in 0..t {
        for (o, &v) in out.iter_mut().zip(&raster.data()[b * frame..(b + 1) * frame]) {
            *o += v as f64;
        }
    }
    Tensor::from_vec(&[p, h, w], out).expect("frame shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { optimizer: AdamConfig::default(), batch_size: 64, epochs: 10, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub final_train_accuracy: f64,
    pub final_test_accuracy: Option<f64>,
}

/// Per-sample contribution to a batch update.
pub struct SampleGrad {
    pub loss: f64,
    pub grads: Gradients,
    pub correct: bool,
    /// Tapes whose batchnorm inputs feed the running statistics.
    pub tapes: Vec<Tape>,
}

/// Cross-entropy on the class scores, backpropagated through time.
pub fn cross_entropy_objective(net: &Network, ex: &Example) -> Result<SampleGrad> {
    let out = net.forward(&ex.input, ForwardOptions::recording())?;
    let tape = out.tape.expect("recorded");
    let loss = cross_entropy(&out.logits, ex.label);
    let up = cross_entropy_grad(&out.logits, ex.label);
    let (_, grads) = net.backward(&tape, &up, true)?;
    Ok(SampleGrad {
        loss,
        grads: grads.expect("requested"),
        correct: argmax(&out.logits) == ex.label,
        tapes: vec![tape],
    })
}

/// Fraction of examples classified correctly.
pub fn evaluate(net: &Network, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let correct = examples
        .par_iter()
        .map(|ex| net.logits(&ex.input).map(|l| usize::from(argmax(&l) == ex.label)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / examples.len() as f64)
}

/// Mini-batch Adam training with a pluggable per-sample objective.
/// Per-sample gradients are computed in parallel and reduced in sample
/// order, so results do not depend on the thread count.
pub fn fit<F>(
    net: &Network,
    train: &[Example],
    test: Option<&[Example]>,
    cfg: &TrainConfig,
    objective: F,
) -> Result<(Network, TrainReport)>
where
    F: Fn(&Network, &Example) -> Result<SampleGrad> + Sync,
{
    cfg.validate()?;
    if train.is_empty() && cfg.epochs > 0 {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut net = net.clone();
    let mut adam = Adam::new(&net, cfg.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let results = batch.par_iter().map(|&i| objective(&net, &train[i])).collect::<Result<Vec<_>>>()?;
            let mut total = Gradients::zeros_like(&net);
            for r in &results {
                if !r.loss.is_finite() {
                    return Err(Error::Divergence(format!("non-finite loss {} in epoch {epoch}", r.loss)));
                }
                total.add_scaled(&r.grads, 1.0);
                loss_sum += r.loss;
                correct += usize::from(r.correct);
            }
            total.scale(1.0 / batch.len() as f64);
            if !total.is_finite() {
                return Err(Error::Divergence(format!("non-finite gradient in epoch {epoch}")));
            }
            adam.update(&mut net, &total);
            update_batchnorm_stats(&mut net, results.iter().flat_map(|r| &r.tapes));
        }
        let test_accuracy = test.map(|t| evaluate(&net, t)).transpose()?;
        let rec = EpochRecord {
            epoch,
            loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            test_accuracy,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} train acc {:.3} test acc {:?}",
            rec.loss,
            rec.train_accuracy,
            rec.test_accuracy
        );
        records.push(rec);
    }
    let final_train_accuracy = evaluate(&net, train)?;
    let final_test_accuracy = test.map(|t| evaluate(&net, t)).transpose()?;
    Ok((net, TrainReport { seed: cfg.seed, config: *cfg, epochs: records, final_train_accuracy, final_test_accuracy }))
}

/// Surrogate-gradient BPTT on cross-entropy over spike counts. Also trains
/// analog networks, for which it reduces to ordinary backpropagation.
pub fn train_bptt(
    net: &Network,
    train: &[Example],
    test: Option<&[Example]>,
    cfg: &TrainConfig,
) -> Result<(Network, TrainReport)> {
    fit(net, train, test, cfg, cross_entropy_objective)
}

/// Momentum update of batchnorm running statistics from the inputs the
/// layer saw in this batch (over samples, time steps and positions).
fn update_batchnorm_stats<'a>(net: &mut Network, tapes: impl Iterator<Item = &'a Tape> + Clone) {
    let bn_layers: Vec<usize> =
        net.layers().iter().enumerate().filter_map(|(i, l)| matches!(l, Layer::BatchNorm(_)).then_some(i)).collect();
    for i in bn_layers {
        let Layer::BatchNorm(bn) = &net.layers()[i] else { unreachable!() };
        let c = bn.channels;
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut count = 0usize;
        for tape in tapes.clone() {
            for x in tape.layer_inputs(i) {
                let per = x.len() / c;
                for ch in 0..c {
                    for v in &x[ch * per..(ch + 1) * per] {
                        sum[ch] += v;
                        sq[ch] += v * v;
                    }
                }
                count += per;
            }
        }
        if count == 0 {
            continue;
        }
        let Layer::BatchNorm(bn) = &mut net.layers_mut()[i] else { unreachable!() };
        for ch in 0..c {
            let mean = sum[ch] / count as f64;
            let var = (sq[ch] / count as f64 - mean * mean).max(0.0);
            bn.running_mean[ch] = (1.0 - bn.momentum) * bn.running_mean[ch] + bn.momentum * mean;
            bn.running_var[ch] = (1.0 - bn.momentum) * bn.running_var[ch] + bn.momentum * var;
        }
    }
}
