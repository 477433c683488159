use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::check_label;
use crate::error::{Error, Result};
use crate::snn::{log_softmax, log_softmax_grad, Classifier};
use crate::tensor::{sign, Tensor};
use crate::training::Example;

/// Axis-aligned rectangle in sensor coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub y: usize,
    pub x: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    /// Binary `[T, P, h, w]`.
    pub data: Tensor,
    pub target_label: usize,
    /// Fixed placement region; `None` places the patch inside each
    /// sample's active bounding box.
    pub region: Option<Region>,
}

impl Patch {
    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }

    /// Placement region for input `x`.
    pub fn region_for(&self, x: &Tensor) -> Region {
        self.region.unwrap_or_else(|| active_bounding_box(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchConfig {
    pub target_label: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default)]
    pub region: Option<Region>,
    /// Per-sample optimisation stops once the target probability reaches
    /// this value.
    pub confidence_threshold: f64,
    pub epochs: usize,
    pub max_steps_per_sample: usize,
    pub step_size: f64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            target_label: 0,
            height: 4,
            width: 4,
            region: None,
            confidence_threshold: 0.75,
            epochs: 1,
            max_steps_per_sample: 50,
            step_size: 0.1,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("patch must be at least 1x1".into()));
        }
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold <= 1.0) {
            return Err(Error::Config("confidence_threshold must lie in (0, 1]".into()));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::Config("step_size must be positive".into()));
        }
        Ok(())
    }
}

fn dims(x: &Tensor) -> Result<[usize; 4]> {
    match *x.shape() {
        [t, p, h, w] => Ok([t, p, h, w]),
        _ => Err(Error::Validation(format!("expected a [T, P, H, W] raster, got shape {:?}", x.shape()))),
    }
}

/// Smallest rectangle holding every pixel active at any time or polarity;
/// the full frame when nothing is active.
pub fn active_bounding_box(x: &Tensor) -> Region {
    let [t, p, h, w] = dims(x).expect("raster tensor");
    let (mut y0, mut y1, mut x0, mut x1) = (h, 0, w, 0);
    for plane in 0..t * p {
        for i in 0..h {
            for j in 0..w {
                if x.data()[(plane * h + i) * w + j] != 0.0 {
                    y0 = y0.min(i);
                    y1 = y1.max(i + 1);
                    x0 = x0.min(j);
                    x1 = x1.max(j + 1);
                }
            }
        }
    }
    if y1 == 0 {
        return Region { y: 0, x: 0, height: h, width: w };
    }
    Region { y: y0, x: x0, height: y1 - y0, width: x1 - x0 }
}

/// Uniform top-left corner for an `h x w` patch inside `region`, shifted
/// back into the `frame_h x frame_w` frame where the region is too small.
pub fn sample_position(
    region: Region,
    h: usize,
    w: usize,
    frame_h: usize,
    frame_w: usize,
    rng: &mut impl Rng,
) -> Result<(usize, usize)> {
    if h > frame_h || w > frame_w {
        return Err(Error::Validation(format!("{h}x{w} patch does not fit a {frame_h}x{frame_w} frame")));
    }
    let axis = |start: usize, len: usize, size: usize, frame: usize, rng: &mut dyn rand::RngCore| {
        let lo = start.min(frame - size);
        let hi = (start + len).saturating_sub(size).clamp(lo, frame - size);
        rng.random_range(lo..=hi)
    };
    let y = axis(region.y, region.height, h, frame_h, rng);
    let x = axis(region.x, region.width, w, frame_w, rng);
    Ok((y, x))
}

/// `max(x, patch)` over the patch footprint at top-left `(y, x)`.
pub fn apply_patch(x: &Tensor, patch: &Patch, position: (usize, usize)) -> Result<Tensor> {
    let [t, p, h, w] = dims(x)?;
    let [pt, pp, ph, pw] = dims(&patch.data)?;
    if pt != t || pp != p {
        return Err(Error::Validation(format!("patch shape {:?} does not match T={t}, P={p}", patch.data.shape())));
    }
    let (y0, x0) = position;
    if y0 + ph > h || x0 + pw > w {
        return Err(Error::Validation(format!("{ph}x{pw} patch at ({y0}, {x0}) leaves the {h}x{w} frame")));
    }
    let mut out = x.clone();
    let data = out.data_mut();
    for plane in 0..t * p {
        for i in 0..ph {
            for j in 0..pw {
                let v = patch.data.data()[(plane * ph + i) * pw + j];
                let o = &mut data[(plane * h + y0 + i) * w + x0 + j];
                *o = o.max(v);
            }
        }
    }
    Ok(out)
}

/// Each voxel independently on with probability 1/2.
pub fn random_patch(shape: [usize; 4], target_label: usize, region: Option<Region>, seed: u64) -> Patch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
    Patch { data: Tensor::from_vec(&shape, data).expect("shape product"), target_label, region }
}

/// Targeted universal patch. For every eligible sample the patch is placed
/// at a random position and its continuous copy takes sign-gradient steps
/// on the target's log-softmax (straight-through: the network sees the
/// rounded patch) until the target confidence passes the threshold.
pub fn train_patch<C: Classifier + ?Sized>(net: &C, train: &[Example], cfg: &PatchConfig, seed: u64) -> Result<Patch> {
    cfg.validate()?;
    check_label(net, cfg.target_label)?;
    let eligible: Vec<&Example> = train.iter().filter(|e| e.label != cfg.target_label).collect();
    if eligible.is_empty() {
        return Err(Error::Validation("no training samples outside the target class".into()));
    }
    let [t, p, h, w] = dims(&eligible[0].input)?;
    if cfg.height > h || cfg.width > w {
        return Err(Error::Validation(format!("{}x{} patch does not fit a {h}x{w} frame", cfg.height, cfg.width)));
    }
    let shape = [t, p, cfg.height, cfg.width];
    let mut shadow = Tensor::zeros(&shape);
    let mut patch = Patch { data: Tensor::zeros(&shape), target_label: cfg.target_label, region: cfg.region };
    let log_threshold = cfg.confidence_threshold.ln();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..eligible.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut reached = 0usize;
        for &i in &order {
            let x = &eligible[i].input;
            let (y0, x0) = sample_position(patch.region_for(x), cfg.height, cfg.width, h, w, &mut rng)?;
            for _ in 0..cfg.max_steps_per_sample {
                let input = apply_patch(x, &patch, (y0, x0))?;
                let (logits, grads) =
                    net.input_gradients(&input, &mut |l| vec![log_softmax_grad(l, cfg.target_label)])?;
                if log_softmax(&logits)[cfg.target_label] >= log_threshold {
                    reached += 1;
                    break;
                }
                let g = &grads[0];
                for plane in 0..t * p {
                    for a in 0..cfg.height {
                        for b in 0..cfg.width {
                            let src = (plane * h + y0 + a) * w + x0 + b;
                            // max(x, patch) passes gradient only where x is off.
                            if x.data()[src] != 0.0 {
                                continue;
                            }
                            let k = (plane * cfg.height + a) * cfg.width + b;
                            let s = &mut shadow.data_mut()[k];
                            *s = (*s + cfg.step_size * sign(g.data()[src])).clamp(0.0, 1.0);
                        }
                    }
                }
                patch.data = shadow.map(f64::round);
            }
        }
        log::debug!("patch epoch {epoch}: {reached}/{} samples reached target confidence", order.len());
    }
    Ok(patch)
}
