//! Discrete-time spiking convolutional networks.
//!
//! Spiking networks are unrolled over the time bins of their input
//! raster: every bin is pushed through the layer stack once, spiking layers
//! keep their membrane potentials between bins, and the output is the
//! per-class spike count. Analog networks are ordinary CNNs over a single
//! frame and share the same layer kernels.

mod iaf;
mod layer;
mod loss;
mod model_io;
mod network;

pub use iaf::{relaxed_spike, surrogate, IafParams, IafState, SpikeFn, DEFAULT_THRESHOLD};
pub use layer::{BatchNorm, Conv2d, Layer, LayerKind, Linear, Quantized};
pub use loss::{
    argmax, cross_entropy, cross_entropy_grad, kl_divergence, kl_divergence_grads, log_softmax, log_softmax_grad,
    logits_and_label, softmax,
};
pub use model_io::{load_model, model_from_bytes, model_to_bytes, save_model, MODEL_FORMAT_VERSION};
pub use network::{Classifier, ForwardOptions, ForwardOutput, Gradients, Mode, Network, Tape};

use crate::error::Result;

/// Classic LeNet-5 geometry: three 5x5 convolutions with 2x2 pooling after
/// the first two, then two fully-connected layers. `channels` lists the
/// widths of the five weighted layers; the last must equal the class count.
pub fn lenet5(
    mode: Mode,
    input_shape: [usize; 3],
    channels: [usize; 5],
    batchnorm: bool,
    bias: bool,
) -> Result<Network> {
    let act = || match mode {
        Mode::Spiking => Layer::iaf(),
        Mode::Analog => Layer::Relu,
    };
    let mut layers = Vec::new();
    let mut in_ch = input_shape[0];
    for (i, &out) in channels[..3].iter().enumerate() {
        layers.push(Layer::conv2d(in_ch, out, 5, 1, 0, bias));
        if batchnorm {
            layers.push(Layer::BatchNorm(BatchNorm::new(out)));
        }
        layers.push(act());
        if i < 2 {
            layers.push(Layer::SumPool2d { size: 2 });
        }
        in_ch = out;
    }
    layers.push(Layer::Flatten);
    let flat = flattened_width(input_shape, &layers)
        .ok_or_else(|| crate::Error::Validation("input too small for LeNet-5".into()))?;
    layers.push(Layer::linear(flat, channels[3], bias));
    if batchnorm {
        layers.push(Layer::BatchNorm(BatchNorm::new(channels[3])));
    }
    layers.push(act());
    layers.push(Layer::linear(channels[3], channels[4], bias));
    if mode == Mode::Spiking {
        layers.push(Layer::iaf());
    }
    Network::new(mode, input_shape, channels[4], layers)
}

/// Small two-convolution network sized for 16x16-ish desk-scale rasters:
/// `conv3x3(c1) -> act -> pool2 -> conv3x3(c2) -> act -> pool2 -> linear`.
pub fn desk_network(mode: Mode, input_shape: [usize; 3], n_classes: usize, widths: [usize; 2]) -> Result<Network> {
    let act = || match mode {
        Mode::Spiking => Layer::iaf(),
        Mode::Analog => Layer::Relu,
    };
    let mut layers = vec![
        Layer::conv2d(input_shape[0], widths[0], 3, 1, 1, false),
        act(),
        Layer::SumPool2d { size: 2 },
        Layer::conv2d(widths[0], widths[1], 3, 1, 1, false),
        act(),
        Layer::SumPool2d { size: 2 },
        Layer::Flatten,
    ];
    let flat = flattened_width(input_shape, &layers)
        .ok_or_else(|| crate::Error::Validation("input too small for desk network".into()))?;
    layers.push(Layer::linear(flat, n_classes, false));
    if mode == Mode::Spiking {
        layers.push(Layer::iaf());
    }
    Network::new(mode, input_shape, n_classes, layers)
}

/// Analog classifier for binarized 28x28 digits:
/// `conv3x3(32) -> relu -> conv3x3(64) -> relu -> pool2 -> linear(128) -> relu -> linear(10)`.
/// Pooling is the engine's average pool rather than a max pool, and there
/// is no dropout.
pub fn bmnist_network(input_shape: [usize; 3]) -> Result<Network> {
    let mut layers = vec![
        Layer::conv2d(input_shape[0], 32, 3, 1, 0, true),
        Layer::Relu,
        Layer::conv2d(32, 64, 3, 1, 0, true),
        Layer::Relu,
        Layer::SumPool2d { size: 2 },
        Layer::Flatten,
    ];
    let flat = flattened_width(input_shape, &layers)
        .ok_or_else(|| crate::Error::Validation("input too small for the B-MNIST network".into()))?;
    layers.push(Layer::linear(flat, 128, true));
    layers.push(Layer::Relu);
    layers.push(Layer::linear(128, 10, true));
    Network::new(Mode::Analog, input_shape, 10, layers)
}

fn flattened_width(input_shape: [usize; 3], layers: &[Layer]) -> Option<usize> {
    let mut shape = input_shape.to_vec();
    for l in layers {
        shape = l.output_shape(&shape).ok()?;
    }
    Some(shape.iter().product())
}
