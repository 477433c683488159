//! Test-only oracles that share no code paths with the engine.
#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikefool::snn::{BatchNorm, ForwardOptions, IafParams, Layer, Mode, Network, SpikeFn};
use spikefool::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Multiples of 1/16 in [-1, 1]: every partial sum of a handful of these is
/// exact in f64, so summation order cannot change a threshold comparison.
fn dyadic(rng: &mut impl Rng) -> f64 {
    rng.random_range(-16i32..=16) as f64 / 16.0
}

fn fill_dyadic(layer: &mut Layer, rng: &mut impl Rng) {
    match layer {
        Layer::Conv2d(c) => {
            c.weight.iter_mut().for_each(|w| *w = dyadic(rng));
            if let Some(b) = c.bias.as_mut() {
                b.iter_mut().for_each(|w| *w = dyadic(rng) / 4.0);
            }
        }
        Layer::Linear(l) => {
            l.weight.iter_mut().for_each(|w| *w = dyadic(rng));
            if let Some(b) = l.bias.as_mut() {
                b.iter_mut().for_each(|w| *w = dyadic(rng) / 4.0);
            }
        }
        _ => {}
    }
}

fn random_iaf(rng: &mut impl Rng) -> Layer {
    Layer::SpikingIaf(IafParams {
        threshold: [0.5, 1.0, 1.5][rng.random_range(0..3)],
        clamp_at_zero: rng.random_bool(0.3),
    })
}

/// Random spiking network with at most three weighted layers.
pub fn random_spiking_net(rng: &mut impl Rng) -> Network {
    let p = rng.random_range(1..=2);
    let h = rng.random_range(4..=12);
    let w = rng.random_range(4..=12);
    let n_classes = rng.random_range(2..=4);
    let bias = rng.random_bool(0.5);
    let mut layers = Vec::new();
    let mut shape = vec![p, h, w];
    match rng.random_range(0..3) {
        0 => {
            let c = rng.random_range(1..=3);
            let k = [1, 3][rng.random_range(0..2)];
            let stride = rng.random_range(1..=2);
            let pad = if k == 3 { rng.random_range(0..=1) } else { 0 };
            layers.push(Layer::conv2d(p, c, k, stride, pad, bias));
            layers.push(random_iaf(rng));
        }
        1 => {
            let c = rng.random_range(1..=3);
            layers.push(Layer::conv2d(p, c, 3, 1, 1, bias));
            layers.push(random_iaf(rng));
            layers.push(Layer::SumPool2d { size: 2 });
            let c2 = rng.random_range(1..=3);
            layers.push(Layer::conv2d(c, c2, 3, 1, 1, bias));
            layers.push(random_iaf(rng));
        }
        _ => {}
    }
    for l in &layers {
        shape = l.output_shape(&shape).unwrap();
    }
    layers.push(Layer::Flatten);
    let flat: usize = shape.iter().product();
    if rng.random_bool(0.5) && layers.len() < 4 {
        let hidden = rng.random_range(3..=8);
        layers.push(Layer::linear(flat, hidden, bias));
        layers.push(random_iaf(rng));
        layers.push(Layer::linear(hidden, n_classes, bias));
    } else {
        layers.push(Layer::linear(flat, n_classes, bias));
    }
    layers.push(random_iaf(rng));
    for l in &mut layers {
        fill_dyadic(l, rng);
    }
    Network::new(Mode::Spiking, [p, h, w], n_classes, layers).unwrap()
}

pub fn random_binary_raster(rng: &mut impl Rng, t: usize, shape: [usize; 3], density: f64) -> Tensor {
    let n = t * shape.iter().product::<usize>();
    let data = (0..n).map(|_| f64::from(u8::from(rng.random_bool(density)))).collect();
    Tensor::from_vec(&[t, shape[0], shape[1], shape[2]], data).unwrap()
}

/// Straightforward per-neuron simulation: every output value is computed
/// by its own gather loop and every IAF neuron is stepped individually.
pub fn scalar_simulate(net: &Network, x: &Tensor) -> Vec<f64> {
    let [t_steps, p, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let frame = p * h * w;
    let mut state: Vec<Vec<f64>> = net.layers().iter().map(|_| Vec::new()).collect();
    let mut counts = vec![0.0; net.n_classes()];
    for t in 0..t_steps {
        let mut act: Vec<f64> = x.data()[t * frame..(t + 1) * frame].to_vec();
        let mut shape = vec![p, h, w];
        for (li, layer) in net.layers().iter().enumerate() {
            let out_shape = layer.output_shape(&shape).unwrap();
            let mut out = vec![0.0; out_shape.iter().product()];
            match layer {
                Layer::Conv2d(c) => {
                    let (ih, iw) = (shape[1], shape[2]);
                    let (oh, ow) = (out_shape[1], out_shape[2]);
                    for co in 0..c.out_channels {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut v = c.bias.as_ref().map_or(0.0, |b| b[co]);
                                for ci in 0..c.in_channels {
                                    for ky in 0..c.kernel {
                                        for kx in 0..c.kernel {
                                            let iy = (oy * c.stride + ky) as i64 - c.padding as i64;
                                            let ix = (ox * c.stride + kx) as i64 - c.padding as i64;
                                            if iy < 0 || ix < 0 || iy >= ih as i64 || ix >= iw as i64 {
                                                continue;
                                            }
                                            let wv =
                                                c.weight[((co * c.in_channels + ci) * c.kernel + ky) * c.kernel + kx];
                                            v += wv * act[(ci * ih + iy as usize) * iw + ix as usize];
                                        }
                                    }
                                }
                                out[(co * oh + oy) * ow + ox] = v;
                            }
                        }
                    }
                }
                Layer::Linear(l) => {
                    for o in 0..l.out_features {
                        let mut v = l.bias.as_ref().map_or(0.0, |b| b[o]);
                        for i in 0..l.in_features {
                            v += l.weight[o * l.in_features + i] * act[i];
                        }
                        out[o] = v;
                    }
                }
                Layer::SumPool2d { size } => {
                    let (ih, iw) = (shape[1], shape[2]);
                    let (oh, ow) = (out_shape[1], out_shape[2]);
                    for c in 0..shape[0] {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut v = 0.0;
                                for dy in 0..*size {
                                    for dx in 0..*size {
                                        v += act[(c * ih + oy * size + dy) * iw + ox * size + dx];
                                    }
                                }
                                out[(c * oh + oy) * ow + ox] = v;
                            }
                        }
                    }
                }
                Layer::Flatten => out.copy_from_slice(&act),
                Layer::Relu => {
                    for (o, a) in out.iter_mut().zip(&act) {
                        *o = if *a > 0.0 { *a } else { 0.0 };
                    }
                }
                Layer::SpikingIaf(params) => {
                    if state[li].is_empty() {
                        state[li] = vec![0.0; act.len()];
                    }
                    for n in 0..act.len() {
                        let mut v = state[li][n] + act[n];
                        let fired = v >= params.threshold;
                        if fired {
                            v -= params.threshold;
                        }
                        if params.clamp_at_zero && v < 0.0 {
                            v = 0.0;
                        }
                        state[li][n] = v;
                        out[n] = if fired { 1.0 } else { 0.0 };
                    }
                }
                Layer::BatchNorm(_) => panic!("oracle does not model batchnorm"),
            }
            act = out;
            shape = out_shape;
        }
        for (c, a) in counts.iter_mut().zip(&act) {
            *c += a;
        }
    }
    counts
}

/// Random small analog network covering conv, linear, pooling, batchnorm,
/// relu and flatten, with smooth random weights.
pub fn random_analog_net(rng: &mut impl Rng) -> Network {
    let p = rng.random_range(1..=2);
    let h = rng.random_range(4..=7);
    let w = rng.random_range(4..=7);
    let n_classes = rng.random_range(2..=4);
    let c = rng.random_range(1..=3);
    let stride = rng.random_range(1..=2);
    let mut layers = vec![Layer::conv2d(p, c, 3, stride, 1, true)];
    if rng.random_bool(0.5) {
        let mut bn = BatchNorm::new(c);
        for i in 0..c {
            bn.gamma[i] = rng.random_range(0.5..1.5);
            bn.beta[i] = rng.random_range(-0.3..0.3);
            bn.running_mean[i] = rng.random_range(-0.2..0.2);
            bn.running_var[i] = rng.random_range(0.5..2.0);
        }
        layers.push(Layer::BatchNorm(bn));
    }
    layers.push(Layer::Relu);
    let mut shape = vec![p, h, w];
    for l in &layers {
        shape = l.output_shape(&shape).unwrap();
    }
    if shape[1] >= 2 && shape[2] >= 2 && rng.random_bool(0.6) {
        layers.push(Layer::SumPool2d { size: 2 });
        shape = layers.last().unwrap().output_shape(&shape).unwrap();
    }
    layers.push(Layer::Flatten);
    let flat: usize = shape.iter().product();
    let hidden = rng.random_range(3..=6);
    layers.push(Layer::linear(flat, hidden, true));
    layers.push(Layer::Relu);
    layers.push(Layer::linear(hidden, n_classes, rng.random_bool(0.5)));
    let mut net = Network::new(Mode::Analog, [p, h, w], n_classes, layers).unwrap();
    for t in net.params_mut() {
        for v in t.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    net
}

/// Random spiking network for gradient checks (all layer kinds that carry
/// gradients in spiking mode, smooth weights).
pub fn random_relaxed_net(rng: &mut impl Rng) -> Network {
    let p = rng.random_range(1..=2);
    let h = rng.random_range(4..=6);
    let w = rng.random_range(4..=6);
    let n_classes = rng.random_range(2..=3);
    let c = rng.random_range(1..=3);
    let mut layers = vec![Layer::conv2d(p, c, 3, 1, 1, true)];
    if rng.random_bool(0.5) {
        let mut bn = BatchNorm::new(c);
        for i in 0..c {
            bn.gamma[i] = rng.random_range(0.5..1.5);
            bn.beta[i] = rng.random_range(-0.2..0.2);
            bn.running_var[i] = rng.random_range(0.5..2.0);
        }
        layers.push(Layer::BatchNorm(bn));
    }
    layers.push(random_iaf(rng));
    layers.push(Layer::SumPool2d { size: 2 });
    let mut shape = vec![p, h, w];
    for l in &layers {
        shape = l.output_shape(&shape).unwrap();
    }
    layers.push(Layer::Flatten);
    let flat: usize = shape.iter().product();
    layers.push(Layer::linear(flat, n_classes, true));
    layers.push(random_iaf(rng));
    let mut net = Network::new(Mode::Spiking, [p, h, w], n_classes, layers).unwrap();
    for t in net.params_mut() {
        for v in t.iter_mut() {
            *v = rng.random_range(-1.0..1.5);
        }
    }
    net
}

pub fn relaxed_scalar(net: &Network, x: &Tensor, upstream: &[f64], spike_fn: SpikeFn) -> f64 {
    let out = net.forward(x, ForwardOptions { record: false, spike_fn }).unwrap();
    out.logits.iter().zip(upstream).map(|(a, b)| a * b).sum()
}

/// Central finite differences of `<upstream, f(x)>` with respect to the
/// input and to every parameter.
pub fn finite_difference_grads(
    net: &Network,
    x: &Tensor,
    upstream: &[f64],
    spike_fn: SpikeFn,
    h: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut gx = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut a = x.clone();
        a.data_mut()[i] += h;
        let mut b = x.clone();
        b.data_mut()[i] -= h;
        gx.push(
            (relaxed_scalar(net, &a, upstream, spike_fn) - relaxed_scalar(net, &b, upstream, spike_fn)) / (2.0 * h),
        );
    }
    let n_tensors = net.params().len();
    let mut gp = Vec::new();
    for ti in 0..n_tensors {
        let len = net.params()[ti].len();
        for j in 0..len {
            let mut a = net.clone();
            a.params_mut()[ti][j] += h;
            let mut b = net.clone();
            b.params_mut()[ti][j] -= h;
            gp.push(
                (relaxed_scalar(&a, x, upstream, spike_fn) - relaxed_scalar(&b, x, upstream, spike_fn)) / (2.0 * h),
            );
        }
    }
    (gx, gp)
}

/// `max_i |a_i - b_i| / max(max_j |b_j|, 1e-12)`.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}
