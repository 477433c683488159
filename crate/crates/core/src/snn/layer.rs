//! Layer definitions and their per-timestep forward/backward kernels.
//!
//! Activations are flat `f64` slices; each kernel receives the shape of
//! its input (`[C, H, W]` for spatial layers, `[N]` after flattening).

use serde::{Deserialize, Serialize};

use super::iaf::IafParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantized {
    pub scale: f64,
    pub codes: Vec<i8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out, in, k, k]`.
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
    pub quantized: Option<Quantized>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out, in]`.
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
    pub quantized: Option<Quantized>,
}

/// Per-channel affine normalisation with stored statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            channels,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    fn inv_std(&self, c: usize) -> f64 {
        1.0 / (self.running_var[c] + self.eps).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    Linear(Linear),
    /// Non-overlapping `size x size` pooling: sums in spiking mode,
    /// averages in analog mode.
    SumPool2d {
        size: usize,
    },
    BatchNorm(BatchNorm),
    SpikingIaf(IafParams),
    Relu,
    Flatten,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d,
    Linear,
    SumPool2d,
    BatchNorm,
    SpikingIaf,
    Relu,
    Flatten,
}

impl Layer {
    pub fn conv2d(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        Layer::Conv2d(Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: bias.then(|| vec![0.0; out_channels]),
            quantized: None,
        })
    }

    pub fn linear(in_features: usize, out_features: usize, bias: bool) -> Self {
        Layer::Linear(Linear {
            in_features,
            out_features,
            weight: vec![0.0; out_features * in_features],
            bias: bias.then(|| vec![0.0; out_features]),
            quantized: None,
        })
    }

    pub fn iaf() -> Self {
        Layer::SpikingIaf(IafParams::default())
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv2d(_) => LayerKind::Conv2d,
            Layer::Linear(_) => LayerKind::Linear,
            Layer::SumPool2d { .. } => LayerKind::SumPool2d,
            Layer::BatchNorm(_) => LayerKind::BatchNorm,
            Layer::SpikingIaf(_) => LayerKind::SpikingIaf,
            Layer::Relu => LayerKind::Relu,
            Layer::Flatten => LayerKind::Flatten,
        }
    }

    pub fn is_weighted(&self) -> bool {
        matches!(self, Layer::Conv2d(_) | Layer::Linear(_))
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |msg: String| Err(Error::Validation(msg));
        match self {
            Layer::Conv2d(c) => {
                let [ch, h, w] = match input {
                    &[ch, h, w] => [ch, h, w],
                    _ => return bad(format!("conv2d needs [C, H, W] input, got {input:?}")),
                };
                if ch != c.in_channels {
                    return bad(format!("conv2d expects {} channels, got {ch}", c.in_channels));
                }
                if c.stride == 0 || c.kernel == 0 {
                    return bad("conv2d kernel and stride must be positive".into());
                }
                if h + 2 * c.padding < c.kernel || w + 2 * c.padding < c.kernel {
                    return bad(format!("conv2d kernel {} larger than padded input", c.kernel));
                }
                if c.weight.len() != c.out_channels * c.in_channels * c.kernel * c.kernel {
                    return bad("conv2d weight length does not match its shape".into());
                }
                if c.bias.as_ref().is_some_and(|b| b.len() != c.out_channels) {
                    return bad("conv2d bias length does not match out_channels".into());
                }
                Ok(vec![
                    c.out_channels,
                    (h + 2 * c.padding - c.kernel) / c.stride + 1,
                    (w + 2 * c.padding - c.kernel) / c.stride + 1,
                ])
            }
            Layer::Linear(l) => {
                if input != [l.in_features] {
                    return bad(format!("linear expects [{}], got {input:?}", l.in_features));
                }
                if l.weight.len() != l.out_features * l.in_features {
                    return bad("linear weight length does not match its shape".into());
                }
                if l.bias.as_ref().is_some_and(|b| b.len() != l.out_features) {
                    return bad("linear bias length does not match out_features".into());
                }
                Ok(vec![l.out_features])
            }
            Layer::SumPool2d { size } => match input {
                &[ch, h, w] if *size > 0 && h >= *size && w >= *size => Ok(vec![ch, h / size, w / size]),
                _ => bad(format!("pool of size {size} cannot apply to {input:?}")),
            },
            Layer::BatchNorm(bn) => {
                if input.first() != Some(&bn.channels) {
                    return bad(format!("batchnorm over {} channels got {input:?}", bn.channels));
                }
                Ok(input.to_vec())
            }
            Layer::SpikingIaf(p) => {
                if !(p.threshold > 0.0 && p.threshold.is_finite()) {
                    return bad(format!("threshold {} must be positive", p.threshold));
                }
                Ok(input.to_vec())
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        match self {
            Layer::Conv2d(Conv2d { weight, bias, .. }) | Layer::Linear(Linear { weight, bias, .. }) => {
                let mut v = vec![weight.as_slice()];
                if let Some(b) = bias {
                    v.push(b.as_slice());
                }
                v
            }
            Layer::BatchNorm(bn) => vec![bn.gamma.as_slice(), bn.beta.as_slice()],
            _ => Vec::new(),
        }
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Layer::Conv2d(Conv2d { weight, bias, .. }) | Layer::Linear(Linear { weight, bias, .. }) => {
                let mut v = vec![weight.as_mut_slice()];
                if let Some(b) = bias {
                    v.push(b.as_mut_slice());
                }
                v
            }
            Layer::BatchNorm(bn) => vec![bn.gamma.as_mut_slice(), bn.beta.as_mut_slice()],
            _ => Vec::new(),
        }
    }
}

pub(crate) fn conv_forward(c: &Conv2d, in_shape: &[usize], out_shape: &[usize], x: &[f64], out: &mut [f64]) {
    let (h, w) = (in_shape[1], in_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let k = c.kernel;
    let plane = oh * ow;
    match &c.bias {
        Some(b) => {
            for (co, chunk) in out.chunks_mut(plane).enumerate() {
                chunk.fill(b[co]);
            }
        }
        None => out.fill(0.0),
    }
    // Scatter each non-zero input into the outputs whose receptive field
    // contains it; spike inputs are sparse.
    for ci in 0..c.in_channels {
        for iy in 0..h {
            for ix in 0..w {
                let v = x[(ci * h + iy) * w + ix];
                if v == 0.0 {
                    continue;
                }
                for ky in 0..k {
                    let ty = iy + c.padding;
                    if ty < ky || !(ty - ky).is_multiple_of(c.stride) {
                        continue;
                    }
                    let oy = (ty - ky) / c.stride;
                    if oy >= oh {
                        continue;
                    }
                    for kx in 0..k {
                        let tx = ix + c.padding;
                        if tx < kx || !(tx - kx).is_multiple_of(c.stride) {
                            continue;
                        }
                        let ox = (tx - kx) / c.stride;
                        if ox >= ow {
                            continue;
                        }
                        let mut wi = (ci * k + ky) * k + kx;
                        let mut oi = oy * ow + ox;
                        let w_stride = c.in_channels * k * k;
                        for _ in 0..c.out_channels {
                            out[oi] += v * c.weight[wi];
                            wi += w_stride;
                            oi += plane;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    c: &Conv2d,
    in_shape: &[usize],
    out_shape: &[usize],
    x: &[f64],
    grad_out: &[f64],
    grad_in: &mut [f64],
    grad_w: Option<(&mut [f64], Option<&mut [f64]>)>,
) {
    let (h, w) = (in_shape[1], in_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let k = c.kernel;
    grad_in.fill(0.0);
    let (mut gw, mut gb) = match grad_w {
        Some((gw, gb)) => (Some(gw), gb),
        None => (None, None),
    };
    for co in 0..c.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = grad_out[(co * oh + oy) * ow + ox];
                if g == 0.0 {
                    continue;
                }
                if let Some(gb) = gb.as_deref_mut() {
                    gb[co] += g;
                }
                for ci in 0..c.in_channels {
                    for ky in 0..k {
                        let iy = (oy * c.stride + ky) as isize - c.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * c.stride + kx) as isize - c.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let wi = ((co * c.in_channels + ci) * k + ky) * k + kx;
                            let xi = (ci * h + iy as usize) * w + ix as usize;
                            grad_in[xi] += g * c.weight[wi];
                            if let Some(gw) = gw.as_deref_mut() {
                                gw[wi] += g * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn linear_forward(l: &Linear, x: &[f64], out: &mut [f64]) {
    match &l.bias {
        Some(b) => out.copy_from_slice(b),
        None => out.fill(0.0),
    }
    for (o, row) in out.iter_mut().zip(l.weight.chunks_exact(l.in_features)) {
        let mut acc = 0.0;
        for (wv, xv) in row.iter().zip(x) {
            if *xv != 0.0 {
                acc += wv * xv;
            }
        }
        *o += acc;
    }
}

pub(crate) fn linear_backward(
    l: &Linear,
    x: &[f64],
    grad_out: &[f64],
    grad_in: &mut [f64],
    grad_w: Option<(&mut [f64], Option<&mut [f64]>)>,
) {
    grad_in.fill(0.0);
    let (mut gw, mut gb) = match grad_w {
        Some((gw, gb)) => (Some(gw), gb),
        None => (None, None),
    };
    for (o, &g) in grad_out.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        if let Some(gb) = gb.as_deref_mut() {
            gb[o] += g;
        }
        let row = &l.weight[o * l.in_features..(o + 1) * l.in_features];
        for (gi, wv) in grad_in.iter_mut().zip(row) {
            *gi += g * wv;
        }
        if let Some(gw) = gw.as_deref_mut() {
            let grow = &mut gw[o * l.in_features..(o + 1) * l.in_features];
            for (gwv, xv) in grow.iter_mut().zip(x) {
                *gwv += g * xv;
            }
        }
    }
}

pub(crate) fn pool_forward(size: usize, scale: f64, in_shape: &[usize], x: &[f64], out: &mut [f64]) {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (h / size, w / size);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..size {
                    for dx in 0..size {
                        acc += x[(ch * h + oy * size + dy) * w + ox * size + dx];
                    }
                }
                out[(ch * oh + oy) * ow + ox] = acc * scale;
            }
        }
    }
}

pub(crate) fn pool_backward(size: usize, scale: f64, in_shape: &[usize], grad_out: &[f64], grad_in: &mut [f64]) {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (h / size, w / size);
    grad_in.fill(0.0);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = grad_out[(ch * oh + oy) * ow + ox] * scale;
                for dy in 0..size {
                    for dx in 0..size {
                        grad_in[(ch * h + oy * size + dy) * w + ox * size + dx] = g;
                    }
                }
            }
        }
    }
}

pub(crate) fn batchnorm_forward(bn: &BatchNorm, x: &[f64], out: &mut [f64]) {
    let per = x.len() / bn.channels;
    for c in 0..bn.channels {
        let a = bn.gamma[c] * bn.inv_std(c);
        let b = bn.beta[c] - a * bn.running_mean[c];
        for i in c * per..(c + 1) * per {
            out[i] = a * x[i] + b;
        }
    }
}

pub(crate) fn batchnorm_backward(
    bn: &BatchNorm,
    x: &[f64],
    grad_out: &[f64],
    grad_in: &mut [f64],
    grad_params: Option<(&mut [f64], &mut [f64])>,
) {
    let per = x.len() / bn.channels;
    let mut gp = grad_params;
    for c in 0..bn.channels {
        let inv = bn.inv_std(c);
        let a = bn.gamma[c] * inv;
        for i in c * per..(c + 1) * per {
            grad_in[i] = a * grad_out[i];
        }
        if let Some((gg, gbeta)) = gp.as_mut() {
            for i in c * per..(c + 1) * per {
                gg[c] += grad_out[i] * (x[i] - bn.running_mean[c]) * inv;
                gbeta[c] += grad_out[i];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Dense gather-style reference convolution.
    fn conv_reference(c: &Conv2d, h: usize, w: usize, x: &[f64]) -> Vec<f64> {
        let k = c.kernel;
        let oh = (h + 2 * c.padding - k) / c.stride + 1;
        let ow = (w + 2 * c.padding - k) / c.stride + 1;
        let mut out = vec![0.0; c.out_channels * oh * ow];
        for co in 0..c.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = c.bias.as_ref().map_or(0.0, |b| b[co]);
                    for ci in 0..c.in_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * c.stride + ky) as isize - c.padding as isize;
                                let ix = (ox * c.stride + kx) as isize - c.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += c.weight[((co * c.in_channels + ci) * k + ky) * k + kx]
                                    * x[(ci * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn scatter_conv_matches_gather() {
        for (stride, padding) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
            let Layer::Conv2d(mut c) = Layer::conv2d(2, 3, 3, stride, padding, true) else { unreachable!() };
            for (i, wv) in c.weight.iter_mut().enumerate() {
                *wv = ((i * 7) % 11) as f64 / 8.0 - 0.5;
            }
            c.bias = Some(vec![0.25, -0.5, 0.125]);
            let (h, w) = (7, 6);
            let x: Vec<f64> = (0..2 * h * w).map(|i| ((i * 5) % 3) as f64).collect();
            let out_shape = Layer::Conv2d(c.clone()).output_shape(&[2, h, w]).unwrap();
            let mut out = vec![0.0; out_shape.iter().product()];
            conv_forward(&c, &[2, h, w], &out_shape, &x, &mut out);
            assert_eq!(out, conv_reference(&c, h, w, &x));
        }
    }

    #[test]
    fn shape_errors() {
        assert!(Layer::conv2d(2, 4, 3, 1, 0, false).output_shape(&[3, 8, 8]).is_err());
        assert!(Layer::linear(4, 2, false).output_shape(&[5]).is_err());
        assert!(Layer::SumPool2d { size: 3 }.output_shape(&[1, 2, 2]).is_err());
        assert_eq!(Layer::Flatten.output_shape(&[2, 3, 4]).unwrap(), vec![24]);
    }
}
