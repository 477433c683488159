use crate::error::{Error, Result};
use crate::snn::{Layer, Network, Quantized};

/// Symmetric per-layer quantisation of conv/linear weights to `bits`-bit
/// signed codes: `scale = max|w| / (2^(bits-1) - 1)`, stored as `f32`.
/// Weights are replaced by their dequantised values so inference runs on
/// exactly what the codes represent. Layers that already carry codes in
/// range are left untouched. Biases are not quantised.
pub fn quantize_weights(net: &Network, bits: u32) -> Result<Network> {
    if !(2..=8).contains(&bits) {
        return Err(Error::Config(format!("quantisation width {bits} not in 2..=8")));
    }
    let qmax = ((1i32 << (bits - 1)) - 1) as f64;
    let mut out = net.clone();
    for layer in out.layers_mut() {
        let (weight, slot) = match layer {
            Layer::Conv2d(c) => (&mut c.weight, &mut c.quantized),
            Layer::Linear(l) => (&mut l.weight, &mut l.quantized),
            _ => continue,
        };
        if let Some(q) = slot {
            if q.codes.iter().all(|&c| (c as f64).abs() <= qmax) {
                continue;
            }
        }
        let q = quantize_tensor(weight, qmax);
        for (w, &c) in weight.iter_mut().zip(&q.codes) {
            *w = c as f64 * q.scale;
        }
        *slot = Some(q);
    }
    Ok(out)
}

pub fn quantize_tensor(weights: &[f64], qmax: f64) -> Quantized {
    let max = weights.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    if max == 0.0 {
        return Quantized { scale: 1.0, codes: vec![0; weights.len()] };
    }
    let scale = (max / qmax) as f32 as f64;
    let codes = weights.iter().map(|w| (w / scale).round().clamp(-qmax, qmax) as i8).collect();
    Quantized { scale, codes }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::snn::Mode;

    fn one_layer(weights: Vec<f64>) -> Network {
        let mut lin = Layer::linear(weights.len(), 1, false);
        if let Layer::Linear(l) = &mut lin {
            l.weight = weights.clone();
        }
        Network::new(Mode::Analog, [weights.len(), 1, 1], 1, vec![Layer::Flatten, lin]).unwrap()
    }

    fn codes(net: &Network) -> (f64, Vec<i8>) {
        match &net.layers()[1] {
            Layer::Linear(l) => {
                let q = l.quantized.as_ref().unwrap();
                (q.scale, q.codes.clone())
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn worked_example() {
        let q = quantize_weights(&one_layer(vec![-1.0, 0.5, 1.0]), 8).unwrap();
        let (scale, c) = codes(&q);
        assert_eq!(scale, (1.0f64 / 127.0) as f32 as f64);
        assert_eq!(c, vec![-127, 64, 127]);
    }

    #[test]
    fn representable_weights_round_trip_exactly() {
        let scale = 1.0 / 64.0;
        let w: Vec<f64> = [-127, -3, 0, 5, 127].iter().map(|&k| k as f64 * scale).collect();
        let q = quantize_weights(&one_layer(w.clone()), 8).unwrap();
        assert_eq!(q.params()[0], w.as_slice());
    }

    #[test]
    fn idempotent_and_requantisation_stable() {
        let net = one_layer(vec![0.3, -0.77, 0.01, 0.5]);
        let once = quantize_weights(&net, 8).unwrap();
        assert_eq!(quantize_weights(&once, 8).unwrap(), once);
        // Fresh quantisation of the dequantised weights reproduces the codes.
        let mut stripped = once.clone();
        if let Layer::Linear(l) = &mut stripped.layers_mut()[1] {
            l.quantized = None;
        }
        assert_eq!(codes(&quantize_weights(&stripped, 8).unwrap()).1, codes(&once).1);
    }

    #[test]
    fn zero_layer() {
        let q = quantize_weights(&one_layer(vec![0.0; 3]), 8).unwrap();
        assert_eq!(codes(&q), (1.0, vec![0, 0, 0]));
    }

    #[test]
    fn error_bounded_by_half_scale() {
        let w: Vec<f64> = (0..50).map(|i| ((i * 37 % 101) as f64 - 50.0) / 17.0).collect();
        let q = quantize_weights(&one_layer(w.clone()), 8).unwrap();
        let (scale, _) = codes(&q);
        for (a, b) in w.iter().zip(q.params()[0]) {
            assert!((a - b).abs() <= scale / 2.0 + 1e-12);
        }
    }
}
