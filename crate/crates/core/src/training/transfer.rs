use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::snn::{ForwardOptions, IafParams, Layer, Mode, Network};
use crate::tensor::Tensor;

/// Percentile used to pick each layer's activity scale.
pub const TRANSFER_PERCENTILE: f64 = 99.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    /// Activity scale `s_l` of each weighted layer, in order.
    pub scales: Vec<f64>,
    /// Factor each weighted layer's weights were multiplied by.
    pub weight_factors: Vec<f64>,
}

/// Nearest-rank percentile: the smallest sample with at least `q` percent
/// of the data at or below it.
pub fn percentile(values: &mut [f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let rank = ((q / 100.0) * n as f64).ceil().clamp(1.0, n as f64) as usize;
    let (_, v, _) = values.select_nth_unstable_by(rank - 1, f64::total_cmp);
    Some(*v)
}

/// Converts an analog network trained on rate frames into a spiking one.
///
/// The analog net is evaluated on `calibration` frames (`[1, P, H, W]`,
/// time-summed counts divided by the number of bins). For every
/// conv/linear layer the 99th percentile `s_l` of its positive
/// pre-activations, pooled over all neurons and samples, is taken as the
/// activity that should drive one spike per step. Weights are rescaled by
/// `θ · s_{l-1} / s_l` (with `s_0 = 1`, the maximal input rate), biases by
/// `θ / s_l`. Analog average pooling becomes spiking sum pooling, so the
/// layer after each pool is further divided by the pool area.
pub fn transfer_weights(analog: &Network, calibration: &[Tensor], iaf: IafParams) -> Result<(Network, TransferReport)> {
    if analog.mode() != Mode::Analog {
        return Err(Error::Validation("weight transfer needs an analog source network".into()));
    }
    if calibration.is_empty() {
        return Err(Error::Calibration("empty calibration set".into()));
    }
    let analog = analog.fold_batchnorm()?;
    let weighted: Vec<usize> =
        analog.layers().iter().enumerate().filter_map(|(i, l)| l.is_weighted().then_some(i)).collect();
    let n_layers = analog.layers().len();

    let mut pools: Vec<Vec<f64>> = vec![Vec::new(); weighted.len()];
    for x in calibration {
        let out = analog.forward(x, ForwardOptions::recording())?;
        let tape = out.tape.expect("recorded");
        for (slot, &li) in weighted.iter().enumerate() {
            let pre: &[f64] =
                if li + 1 == n_layers { &out.logits } else { tape.layer_inputs(li + 1).next().expect("single step") };
            pools[slot].extend(pre.iter().copied().filter(|v| *v > 0.0));
        }
    }
    let scales = pools
        .iter_mut()
        .enumerate()
        .map(|(slot, values)| match percentile(values, TRANSFER_PERCENTILE) {
            Some(s) if s > 0.0 && s.is_finite() => Ok(s),
            _ => Err(Error::Calibration(format!(
                "layer {} has no positive activity on the calibration set",
                weighted[slot]
            ))),
        })
        .collect::<Result<Vec<f64>>>()?;

    let mut spiking = analog.to_spiking_topology(iaf)?;
    let th = iaf.threshold;
    let mut factors = Vec::with_capacity(weighted.len());
    let mut prev_scale = 1.0;
    let mut pool_div = 1.0;
    let mut slot = 0;
    for layer in spiking.layers_mut() {
        match layer {
            Layer::SumPool2d { size } => pool_div *= (*size * *size) as f64,
            Layer::Conv2d(_) | Layer::Linear(_) => {
                let s = scales[slot];
                let factor = th * prev_scale / s / pool_div;
                let mut slices = layer.param_slices_mut().into_iter();
                for w in slices.next().expect("weight").iter_mut() {
                    *w *= factor;
                }
                if let Some(b) = slices.next() {
                    for v in b.iter_mut() {
                        *v *= th / s;
                    }
                }
                if let Layer::Conv2d(c) = layer {
                    c.quantized = None;
                } else if let Layer::Linear(l) = layer {
                    l.quantized = None;
                }
                factors.push(factor);
                prev_scale = s;
                pool_div = 1.0;
                slot += 1;
            }
            _ => {}
        }
    }
    Ok((spiking, TransferReport { scales, weight_factors: factors }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentile() {
        let mut v: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        v.reverse();
        assert_eq!(percentile(&mut v, 99.0), Some(1.0));
        let mut v: Vec<f64> = (1..=200).map(|i| i as f64).collect();
        assert_eq!(percentile(&mut v, 99.0), Some(198.0));
        assert_eq!(percentile(&mut [], 99.0), None);
    }

    fn identity_analog() -> Network {
        let mut lin = Layer::linear(2, 2, false);
        if let Layer::Linear(l) = &mut lin {
            l.weight = vec![1.0, 0.0, 0.0, 1.0];
        }
        Network::new(Mode::Analog, [2, 1, 1], 2, vec![Layer::Flatten, lin]).unwrap()
    }

    #[test]
    fn unit_scales_leave_weights_unchanged() {
        let net = identity_analog();
        let calib = vec![
            Tensor::from_vec(&[1, 2, 1, 1], vec![1.0, 0.0]).unwrap(),
            Tensor::from_vec(&[1, 2, 1, 1], vec![0.0, 1.0]).unwrap(),
        ];
        let (snn, report) = transfer_weights(&net, &calib, IafParams::default()).unwrap();
        assert_eq!(report.scales, vec![1.0]);
        assert_eq!(snn.params()[0], net.params()[0]);
        assert_eq!(snn.mode(), Mode::Spiking);
    }

    #[test]
    fn silent_layer_is_a_calibration_error() {
        let net = identity_analog();
        let calib = vec![Tensor::zeros(&[1, 2, 1, 1])];
        assert!(matches!(transfer_weights(&net, &calib, IafParams::default()), Err(Error::Calibration(_))));
    }
}
