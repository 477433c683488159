use rand::Rng;
use serde::{Deserialize, Serialize};

use super::iaf::{integrate, relaxed_spike, surrogate, IafParams, SpikeFn};
use super::layer::{
    batchnorm_backward, batchnorm_forward, conv_backward, conv_forward, linear_backward, linear_forward, pool_backward,
    pool_forward, BatchNorm, Layer,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Unrolled over the raster's time bins; outputs are spike counts.
    Spiking,
    /// Single-step conventional CNN; outputs are real-valued logits.
    Analog,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    pub record: bool,
    pub spike_fn: SpikeFn,
}

impl ForwardOptions {
    pub fn recording() -> Self {
        ForwardOptions { record: true, spike_fn: SpikeFn::Heaviside }
    }
}

/// Everything the backward pass needs: each layer's input at every time
/// step, plus pre-reset membranes of spiking layers.
#[derive(Debug, Clone)]
pub struct Tape {
    spike_fn: SpikeFn,
    input_shape: Vec<usize>,
    inputs: Vec<Vec<Vec<f64>>>,
    membranes: Vec<Vec<Vec<f64>>>,
}

impl Tape {
    pub fn n_steps(&self) -> usize {
        self.inputs.len()
    }

    /// Recorded input of `layer` at each time step.
    pub fn layer_inputs(&self, layer: usize) -> impl Iterator<Item = &[f64]> {
        self.inputs.iter().map(move |step| step[layer].as_slice())
    }

    /// Pre-reset membrane potentials of a spiking `layer` at each step.
    pub fn membranes(&self, layer: usize) -> impl Iterator<Item = &[f64]> {
        self.membranes.iter().map(move |step| step[layer].as_slice())
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Spike counts (spiking) or logits (analog), one per class.
    pub logits: Vec<f64>,
    pub tape: Option<Tape>,
}

/// Parameter gradients, one flat buffer per parameter tensor in
/// [`Network::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients(net.params().iter().map(|p| vec![0.0; p.len()]).collect())
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.0.iter_mut().flatten() {
            *v *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.0.iter().flatten().copied().collect()
    }
}

/// A feed-forward network description together with its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    mode: Mode,
    input_shape: [usize; 3],
    n_classes: usize,
    layers: Vec<Layer>,
    shapes: Vec<Vec<usize>>,
}

impl Network {
    pub fn new(mode: Mode, input_shape: [usize; 3], n_classes: usize, layers: Vec<Layer>) -> Result<Self> {
        let mut shapes = vec![input_shape.to_vec()];
        for (i, layer) in layers.iter().enumerate() {
            let next = layer
                .output_shape(shapes.last().expect("non-empty"))
                .map_err(|e| Error::Validation(format!("layer {i}: {e}")))?;
            shapes.push(next);
        }
        let out = shapes.last().expect("non-empty");
        if out.as_slice() != [n_classes] {
            return Err(Error::Validation(format!("network output shape {out:?} does not match {n_classes} classes")));
        }
        let n_spiking = layers.iter().filter(|l| matches!(l, Layer::SpikingIaf(_))).count();
        match mode {
            Mode::Spiking => {
                if !matches!(layers.last(), Some(Layer::SpikingIaf(_))) {
                    return Err(Error::Validation("spiking network must end in a spiking_iaf layer".into()));
                }
            }
            Mode::Analog if n_spiking > 0 => {
                return Err(Error::Validation("analog network cannot contain spiking_iaf layers".into()));
            }
            Mode::Analog => {}
        }
        Ok(Network { mode, input_shape, n_classes, layers, shapes })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access for in-place weight edits. Shapes must not change.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Input shape of layer `i`; `layer_shape(layers().len())` is the output.
    pub fn layer_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(Layer::param_slices).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(Layer::param_slices_mut).collect()
    }

    /// Fails if any conv/linear layer carries a bias or a batchnorm layer
    /// remains, neither of which the neuromorphic target supports.
    pub fn check_chip_compatible(&self) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            let bias = match layer {
                Layer::Conv2d(c) => c.bias.is_some(),
                Layer::Linear(l) => l.bias.is_some(),
                Layer::BatchNorm(_) => {
                    return Err(Error::Validation(format!("layer {i}: batchnorm must be folded first")))
                }
                _ => false,
            };
            if bias {
                return Err(Error::Validation(format!("layer {i}: biases are not chip-compatible")));
            }
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Uniform fan-in initialisation `U(-b, b)`, `b = gain * sqrt(6 / fan_in)`.
    /// Biases start at zero; batchnorm at identity.
    pub fn init_weights(&mut self, rng: &mut impl Rng, gain: f64) {
        for layer in &mut self.layers {
            let (weight, fan_in) = match layer {
                Layer::Conv2d(c) => (&mut c.weight, c.in_channels * c.kernel * c.kernel),
                Layer::Linear(l) => (&mut l.weight, l.in_features),
                _ => continue,
            };
            let bound = gain * (6.0 / fan_in as f64).sqrt();
            for w in weight.iter_mut() {
                *w = rng.random_range(-bound..bound);
            }
        }
        for layer in &mut self.layers {
            match layer {
                Layer::Conv2d(c) => {
                    c.quantized = None;
                    if let Some(b) = c.bias.as_mut() {
                        b.fill(0.0);
                    }
                }
                Layer::Linear(l) => {
                    l.quantized = None;
                    if let Some(b) = l.bias.as_mut() {
                        b.fill(0.0);
                    }
                }
                Layer::BatchNorm(bn) => *bn = BatchNorm::new(bn.channels),
                _ => {}
            }
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let shape = x.shape();
        let ok = shape.len() == 4 && shape[1..] == self.input_shape;
        if !ok || (self.mode == Mode::Analog && shape[0] != 1) {
            let t = if self.mode == Mode::Analog { 1 } else { shape.first().copied().unwrap_or(0) };
            return Err(Error::Shape {
                expected: vec![t, self.input_shape[0], self.input_shape[1], self.input_shape[2]],
                actual: shape.to_vec(),
            });
        }
        Ok(shape[0])
    }

    pub fn forward(&self, x: &Tensor, opts: ForwardOptions) -> Result<ForwardOutput> {
        let n_steps = self.check_input(x)?;
        let frame_len: usize = self.input_shape.iter().product();
        let mut membranes: Vec<Option<Vec<f64>>> = self
            .layers
            .iter()
            .zip(&self.shapes)
            .map(|(l, s)| matches!(l, Layer::SpikingIaf(_)).then(|| vec![0.0; s.iter().product()]))
            .collect();
        let mut logits = vec![0.0; self.n_classes];
        let mut tape_inputs = Vec::new();
        let mut tape_membranes = Vec::new();
        let pool_scale = |size: usize| match self.mode {
            Mode::Spiking => 1.0,
            Mode::Analog => 1.0 / (size * size) as f64,
        };

        for t in 0..n_steps {
            let mut cur = x.data()[t * frame_len..(t + 1) * frame_len].to_vec();
            let mut step_inputs = Vec::new();
            let mut step_membranes = Vec::new();
            for (i, layer) in self.layers.iter().enumerate() {
                let in_shape = &self.shapes[i];
                let out_shape = &self.shapes[i + 1];
                let mut out = vec![0.0; out_shape.iter().product()];
                let mut pre_record = Vec::new();
                match layer {
                    Layer::Conv2d(c) => conv_forward(c, in_shape, out_shape, &cur, &mut out),
                    Layer::Linear(l) => linear_forward(l, &cur, &mut out),
                    Layer::SumPool2d { size } => pool_forward(*size, pool_scale(*size), in_shape, &cur, &mut out),
                    Layer::BatchNorm(bn) => batchnorm_forward(bn, &cur, &mut out),
                    Layer::Relu => {
                        for (o, v) in out.iter_mut().zip(&cur) {
                            *o = v.max(0.0);
                        }
                    }
                    Layer::Flatten => out.copy_from_slice(&cur),
                    Layer::SpikingIaf(p) => {
                        let v = membranes[i].as_mut().expect("spiking layer state");
                        if opts.record {
                            pre_record.reserve(v.len());
                        }
                        for ((vm, &inp), o) in v.iter_mut().zip(&cur).zip(out.iter_mut()) {
                            let (pre, s) = integrate(vm, inp, p, opts.spike_fn);
                            if !pre.is_finite() {
                                return Err(Error::Numeric(format!(
                                    "non-finite membrane potential in layer {i} at step {t}"
                                )));
                            }
                            *o = s;
                            if opts.record {
                                pre_record.push(pre);
                            }
                        }
                    }
                }
                if opts.record {
                    step_inputs.push(std::mem::replace(&mut cur, out));
                    step_membranes.push(pre_record);
                } else {
                    cur = out;
                }
            }
            match self.mode {
                Mode::Spiking => {
                    for (l, v) in logits.iter_mut().zip(&cur) {
                        *l += v;
                    }
                }
                Mode::Analog => logits.copy_from_slice(&cur),
            }
            if opts.record {
                tape_inputs.push(step_inputs);
                tape_membranes.push(step_membranes);
            }
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite network output".into()));
        }
        let tape = opts.record.then(|| Tape {
            spike_fn: opts.spike_fn,
            input_shape: x.shape().to_vec(),
            inputs: tape_inputs,
            membranes: tape_membranes,
        });
        Ok(ForwardOutput { logits, tape })
    }

    /// Class scores for `x`.
    pub fn logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.forward(x, ForwardOptions::default())?.logits)
    }

    /// Reverse-mode gradient of `<upstream, logits>` with respect to the
    /// input and (when `want_params`) every parameter, unrolled through
    /// time. Spike nonlinearities use the triangular surrogate; the reset
    /// contributes its exact `1 - θ g(v)` term to the membrane recurrence.
    pub fn backward(&self, tape: &Tape, upstream: &[f64], want_params: bool) -> Result<(Tensor, Option<Gradients>)> {
        if upstream.len() != self.n_classes {
            return Err(Error::Shape { expected: vec![self.n_classes], actual: vec![upstream.len()] });
        }
        if tape.inputs.first().is_some_and(|s| s.len() != self.layers.len()) {
            return Err(Error::Validation("tape was recorded by a different network".into()));
        }
        let n_steps = tape.n_steps();
        let frame_len: usize = self.input_shape.iter().product();
        let mut grad_input = Tensor::zeros(&tape.input_shape);
        let mut grads = want_params.then(|| Gradients::zeros_like(self));
        let param_offsets: Vec<usize> = self
            .layers
            .iter()
            .scan(0, |acc, l| {
                let start = *acc;
                *acc += l.param_slices().len();
                Some(start)
            })
            .collect();
        let mut carries: Vec<Vec<f64>> = self
            .layers
            .iter()
            .zip(&self.shapes)
            .map(|(l, s)| match l {
                Layer::SpikingIaf(_) => vec![0.0; s.iter().product()],
                _ => Vec::new(),
            })
            .collect();
        let pool_scale = |size: usize| match self.mode {
            Mode::Spiking => 1.0,
            Mode::Analog => 1.0 / (size * size) as f64,
        };

        for t in (0..n_steps).rev() {
            let mut g = upstream.to_vec();
            for (i, layer) in self.layers.iter().enumerate().rev() {
                let in_shape = &self.shapes[i];
                let out_shape = &self.shapes[i + 1];
                let x = &tape.inputs[t][i];
                let mut gin = vec![0.0; x.len()];
                match layer {
                    Layer::Conv2d(c) => {
                        let pg =
                            grads.as_mut().map(|gr| split_weight_bias(&mut gr.0, param_offsets[i], c.bias.is_some()));
                        conv_backward(c, in_shape, out_shape, x, &g, &mut gin, pg);
                    }
                    Layer::Linear(l) => {
                        let pg =
                            grads.as_mut().map(|gr| split_weight_bias(&mut gr.0, param_offsets[i], l.bias.is_some()));
                        linear_backward(l, x, &g, &mut gin, pg);
                    }
                    Layer::SumPool2d { size } => pool_backward(*size, pool_scale(*size), in_shape, &g, &mut gin),
                    Layer::BatchNorm(bn) => {
                        let pg = grads.as_mut().map(|gr| {
                            let (a, b) = gr.0[param_offsets[i]..].split_at_mut(1);
                            (a[0].as_mut_slice(), b[0].as_mut_slice())
                        });
                        batchnorm_backward(bn, x, &g, &mut gin, pg);
                    }
                    Layer::Relu => {
                        for ((gi, go), v) in gin.iter_mut().zip(&g).zip(x) {
                            *gi = if *v > 0.0 { *go } else { 0.0 };
                        }
                    }
                    Layer::Flatten => gin.copy_from_slice(&g),
                    Layer::SpikingIaf(p) => {
                        let pre = &tape.membranes[t][i];
                        let carry = &mut carries[i];
                        iaf_backward(p, tape.spike_fn, pre, &g, carry, &mut gin);
                    }
                }
                g = gin;
            }
            grad_input.data_mut()[t * frame_len..(t + 1) * frame_len].copy_from_slice(&g);
        }
        Ok((grad_input, grads))
    }

    /// Replaces every batchnorm that follows a conv/linear layer by an
    /// equivalent rescaling of that layer's weights and bias.
    pub fn fold_batchnorm(&self) -> Result<Network> {
        let mut layers: Vec<Layer> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let Layer::BatchNorm(bn) = layer else {
                layers.push(layer.clone());
                continue;
            };
            let prev = layers
                .last_mut()
                .ok_or_else(|| Error::Validation(format!("batchnorm at layer {i} has no preceding conv/linear")))?;
            let (weight, bias, per_out) = match prev {
                Layer::Conv2d(c) => (&mut c.weight, &mut c.bias, c.in_channels * c.kernel * c.kernel),
                Layer::Linear(l) => (&mut l.weight, &mut l.bias, l.in_features),
                _ => {
                    return Err(Error::Validation(format!(
                        "batchnorm at layer {i} does not follow a conv/linear layer"
                    )))
                }
            };
            let b = bias.get_or_insert_with(|| vec![0.0; bn.channels]);
            for c in 0..bn.channels {
                let a = bn.gamma[c] / (bn.running_var[c] + bn.eps).sqrt();
                for w in &mut weight[c * per_out..(c + 1) * per_out] {
                    *w *= a;
                }
                b[c] = (b[c] - bn.running_mean[c]) * a + bn.beta[c];
            }
            match prev {
                Layer::Conv2d(c) => c.quantized = None,
                Layer::Linear(l) => l.quantized = None,
                _ => {}
            }
        }
        Network::new(self.mode, self.input_shape, self.n_classes, layers)
    }

    /// Same topology with every `relu` replaced by a spiking layer and a
    /// spiking output layer appended; pooling switches to summation.
    pub fn to_spiking_topology(&self, params: IafParams) -> Result<Network> {
        let mut layers: Vec<Layer> = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Relu => Layer::SpikingIaf(params),
                other => other.clone(),
            })
            .collect();
        layers.push(Layer::SpikingIaf(params));
        Network::new(Mode::Spiking, self.input_shape, self.n_classes, layers)
    }
}

fn split_weight_bias(grads: &mut [Vec<f64>], offset: usize, has_bias: bool) -> (&mut [f64], Option<&mut [f64]>) {
    let (w, rest) = grads[offset..].split_at_mut(1);
    let b = if has_bias { Some(rest[0].as_mut_slice()) } else { None };
    (w[0].as_mut_slice(), b)
}

fn iaf_backward(
    p: &IafParams,
    spike_fn: SpikeFn,
    pre: &[f64],
    grad_spikes: &[f64],
    carry: &mut [f64],
    grad_in: &mut [f64],
) {
    let th = p.threshold;
    for n in 0..pre.len() {
        let v = pre[n];
        let sg = surrogate(v, th);
        let mut reset_grad = 1.0 - th * sg;
        if p.clamp_at_zero {
            let s = match spike_fn {
                SpikeFn::Heaviside => f64::from(u8::from(v >= th)),
                SpikeFn::Relaxed => relaxed_spike(v, th),
            };
            if v - th * s < 0.0 {
                reset_grad = 0.0;
            }
        }
        let d = grad_spikes[n] * sg + carry[n] * reset_grad;
        grad_in[n] = d;
        carry[n] = d;
    }
}

/// Anything the attacks can query: class scores and input gradients.
pub trait Classifier: Sync {
    fn n_classes(&self) -> usize;

    fn logits(&self, x: &Tensor) -> Result<Vec<f64>>;

    /// One forward pass, then one input gradient per upstream vector that
    /// `upstreams` derives from the logits.
    fn input_gradients(
        &self,
        x: &Tensor,
        upstreams: &mut dyn FnMut(&[f64]) -> Vec<Vec<f64>>,
    ) -> Result<(Vec<f64>, Vec<Tensor>)>;
}

impl Classifier for Network {
    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        Network::logits(self, x)
    }

    fn input_gradients(
        &self,
        x: &Tensor,
        upstreams: &mut dyn FnMut(&[f64]) -> Vec<Vec<f64>>,
    ) -> Result<(Vec<f64>, Vec<Tensor>)> {
        let out = self.forward(x, ForwardOptions::recording())?;
        let tape = out.tape.expect("recorded");
        let grads = upstreams(&out.logits)
            .iter()
            .map(|u| self.backward(&tape, u, false).map(|(g, _)| g))
            .collect::<Result<Vec<_>>>()?;
        Ok((out.logits, grads))
    }
}
