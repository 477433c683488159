//! `SNN0` model container.
//!
//! Layout (little-endian): magic `SNN0`, `u32` header length, a JSON header
//! describing the topology, then every parameter tensor as `f32` in layer
//! order (conv/linear: weight then bias; batchnorm: gamma, beta, running
//! mean, running variance). When the header's `quantized` flag is set a
//! trailing section follows with, per conv/linear layer, a `u8` presence
//! flag and, if present, an `f32` scale and one `i8` code per weight.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::iaf::IafParams;
use super::layer::{BatchNorm, Conv2d, Layer, Linear, Quantized};
use super::network::{Mode, Network};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SNN0";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerHeader {
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize, bias: bool },
    Linear { in_features: usize, out_features: usize, bias: bool },
    SumPool2d { size: usize },
    BatchNorm { channels: usize, eps: f64, momentum: f64 },
    SpikingIaf { threshold: f64, clamp_at_zero: bool },
    Relu,
    Flatten,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    mode: Mode,
    input_shape: [usize; 3],
    n_classes: usize,
    layers: Vec<LayerHeader>,
    quantized: bool,
}

fn header_of(layer: &Layer) -> LayerHeader {
    match layer {
        Layer::Conv2d(c) => LayerHeader::Conv2d {
            in_channels: c.in_channels,
            out_channels: c.out_channels,
            kernel: c.kernel,
            stride: c.stride,
            padding: c.padding,
            bias: c.bias.is_some(),
        },
        Layer::Linear(l) => {
            LayerHeader::Linear { in_features: l.in_features, out_features: l.out_features, bias: l.bias.is_some() }
        }
        Layer::SumPool2d { size } => LayerHeader::SumPool2d { size: *size },
        Layer::BatchNorm(bn) => LayerHeader::BatchNorm { channels: bn.channels, eps: bn.eps, momentum: bn.momentum },
        Layer::SpikingIaf(p) => LayerHeader::SpikingIaf { threshold: p.threshold, clamp_at_zero: p.clamp_at_zero },
        Layer::Relu => LayerHeader::Relu,
        Layer::Flatten => LayerHeader::Flatten,
    }
}

fn push_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

pub fn model_to_bytes(net: &Network) -> Vec<u8> {
    let quantized = net.layers().iter().any(|l| match l {
        Layer::Conv2d(c) => c.quantized.is_some(),
        Layer::Linear(l) => l.quantized.is_some(),
        _ => false,
    });
    let header = Header {
        version: MODEL_FORMAT_VERSION,
        mode: net.mode(),
        input_shape: net.input_shape(),
        n_classes: net.n_classes(),
        layers: net.layers().iter().map(header_of).collect(),
        quantized,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for layer in net.layers() {
        match layer {
            Layer::Conv2d(Conv2d { weight, bias, .. }) | Layer::Linear(Linear { weight, bias, .. }) => {
                push_f32s(&mut out, weight);
                if let Some(b) = bias {
                    push_f32s(&mut out, b);
                }
            }
            Layer::BatchNorm(bn) => {
                for t in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
                    push_f32s(&mut out, t);
                }
            }
            _ => {}
        }
    }
    if quantized {
        for layer in net.layers() {
            let q = match layer {
                Layer::Conv2d(c) => &c.quantized,
                Layer::Linear(l) => &l.quantized,
                _ => continue,
            };
            match q {
                Some(q) => {
                    out.push(1);
                    out.extend_from_slice(&(q.scale as f32).to_le_bytes());
                    out.extend(q.codes.iter().map(|&c| c as u8));
                }
                None => out.push(0),
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::parse(format!("offset {}", self.pos), "unexpected end of model file"))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect())
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::parse("offset 0", "missing SNN0 magic"));
    }
    let len = r.u32()? as usize;
    let header: Header =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::parse("offset 8", format!("model header: {e}")))?;
    if header.version != MODEL_FORMAT_VERSION {
        return Err(Error::Validation(format!("unsupported model format version {}", header.version)));
    }
    let mut layers = Vec::with_capacity(header.layers.len());
    for h in &header.layers {
        let layer = match *h {
            LayerHeader::Conv2d { in_channels, out_channels, kernel, stride, padding, bias } => {
                let weight = r.f32s(out_channels * in_channels * kernel * kernel)?;
                let bias = if bias { Some(r.f32s(out_channels)?) } else { None };
                Layer::Conv2d(Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    weight,
                    bias,
                    quantized: None,
                })
            }
            LayerHeader::Linear { in_features, out_features, bias } => {
                let weight = r.f32s(out_features * in_features)?;
                let bias = if bias { Some(r.f32s(out_features)?) } else { None };
                Layer::Linear(Linear { in_features, out_features, weight, bias, quantized: None })
            }
            LayerHeader::SumPool2d { size } => Layer::SumPool2d { size },
            LayerHeader::BatchNorm { channels, eps, momentum } => Layer::BatchNorm(BatchNorm {
                channels,
                gamma: r.f32s(channels)?,
                beta: r.f32s(channels)?,
                running_mean: r.f32s(channels)?,
                running_var: r.f32s(channels)?,
                eps,
                momentum,
            }),
            LayerHeader::SpikingIaf { threshold, clamp_at_zero } => {
                Layer::SpikingIaf(IafParams { threshold, clamp_at_zero })
            }
            LayerHeader::Relu => Layer::Relu,
            LayerHeader::Flatten => Layer::Flatten,
        };
        layers.push(layer);
    }
    if header.quantized {
        for layer in &mut layers {
            let (weight, slot) = match layer {
                Layer::Conv2d(c) => (&mut c.weight, &mut c.quantized),
                Layer::Linear(l) => (&mut l.weight, &mut l.quantized),
                _ => continue,
            };
            if r.take(1)?[0] == 0 {
                continue;
            }
            let scale = f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as f64;
            let codes: Vec<i8> = r.take(weight.len())?.iter().map(|&b| b as i8).collect();
            for (w, &c) in weight.iter_mut().zip(&codes) {
                *w = c as f64 * scale;
            }
            *slot = Some(Quantized { scale, codes });
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::parse(format!("offset {}", r.pos), "trailing bytes after model payload"));
    }
    Network::new(header.mode, header.input_shape, header.n_classes, layers)
}

pub fn save_model(path: impl AsRef<Path>, net: &Network) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model_to_bytes(net)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}
