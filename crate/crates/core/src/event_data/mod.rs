//! Event streams, binary rasters and the conversions between them.
//!
//! An [`EventList`] is the sensor-native representation: a time-sorted
//! sequence of `(t, x, y, p)` records. Networks consume [`Raster`]s, dense
//! `[T, P, H, W]` count tensors produced by [`rasterize`]. Attacks operate on
//! rasters, and [`raster_to_new_events`] maps an attacked raster back onto
//! the original stream.

mod io;
mod mnist;
mod synth;

pub use io::{
    load_dataset, load_events, parse_csv_events, parse_raw_events, raster_from_bytes, raster_to_bytes, read_raster,
    save_dataset, write_csv_events, write_raster, write_raw_events, EventFormat, DATASET_INDEX,
};
pub use mnist::{load_binarized_mnist, load_idx_images, load_idx_labels};
pub use synth::{moving_bar, synth_dataset, BarGeometry, SynthDataset, SynthSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Event {
    /// Microseconds.
    pub t: u64,
    pub x: u32,
    pub y: u32,
    /// 0 = OFF, 1 = ON.
    pub p: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorSize {
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventList {
    events: Vec<Event>,
    sensor: SensorSize,
}

impl EventList {
    /// Validates coordinates and polarity, then sorts by time (stable, so
    /// simultaneous events keep their input order).
    pub fn new(mut events: Vec<Event>, sensor: SensorSize) -> Result<Self> {
        for (i, e) in events.iter().enumerate() {
            check_event(e, sensor).map_err(|m| Error::Validation(format!("event {i}: {m}")))?;
        }
        events.sort_by_key(|e| e.t);
        Ok(EventList { events, sensor })
    }

    pub fn empty(sensor: SensorSize) -> Self {
        EventList { events: Vec::new(), sensor }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn sensor(&self) -> SensorSize {
        self.sensor
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

fn check_event(e: &Event, sensor: SensorSize) -> std::result::Result<(), String> {
    if e.x >= sensor.width || e.y >= sensor.height {
        return Err(format!("coordinate ({}, {}) outside {}x{} sensor", e.x, e.y, sensor.width, sensor.height));
    }
    if e.p > 1 {
        return Err(format!("polarity {} not in {{0, 1}}", e.p));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RasterConfig {
    pub duration_us: u64,
    pub n_bins: usize,
    #[serde(default = "default_cap")]
    pub max_per_cell: u8,
    #[serde(default = "default_polarities")]
    pub n_polarities: usize,
}

fn default_cap() -> u8 {
    1
}

fn default_polarities() -> usize {
    2
}

impl RasterConfig {
    pub fn new(duration_us: u64, n_bins: usize) -> Self {
        RasterConfig { duration_us, n_bins, max_per_cell: 1, n_polarities: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.duration_us == 0 {
            return Err(Error::Config("duration_us must be positive".into()));
        }
        if self.n_bins == 0 {
            return Err(Error::Config("n_bins must be at least 1".into()));
        }
        if self.duration_us < self.n_bins as u64 {
            return Err(Error::Config(format!(
                "duration_us ({}) shorter than n_bins ({}) leaves empty bins",
                self.duration_us, self.n_bins
            )));
        }
        if self.max_per_cell == 0 {
            return Err(Error::Config("max_per_cell must be at least 1".into()));
        }
        if self.n_polarities == 0 || self.n_polarities > 2 {
            return Err(Error::Config("n_polarities must be 1 or 2".into()));
        }
        Ok(())
    }

    /// Bin index of a timestamp relative to the slice start, or `None` when
    /// it falls outside `[0, duration_us)`.
    pub fn bin_of(&self, dt: u64) -> Option<usize> {
        if dt >= self.duration_us {
            return None;
        }
        Some(((dt as u128 * self.n_bins as u128) / self.duration_us as u128) as usize)
    }

    /// First relative timestamp belonging to `bin`.
    fn bin_start(&self, bin: usize) -> u64 {
        let num = bin as u128 * self.duration_us as u128;
        num.div_ceil(self.n_bins as u128) as u64
    }

    /// Midpoint of the integer timestamps that map to `bin`.
    pub fn bin_center(&self, bin: usize) -> u64 {
        (self.bin_start(bin) + self.bin_start(bin + 1)) / 2
    }
}

/// `[T, P, H, W]` tensor of per-voxel event counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Raster {
    shape: [usize; 4],
    data: Vec<u8>,
}

impl Raster {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Raster { shape, data: vec![0; shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<u8>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Validation(format!(
                "raster of shape {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Raster { shape, data })
    }

    /// Converts an integer-valued tensor; values are rounded and must lie
    /// in `0..=255`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let shape: [usize; 4] = t
            .shape()
            .try_into()
            .map_err(|_| Error::Validation(format!("raster tensor must be 4-D, got {:?}", t.shape())))?;
        let data = t
            .data()
            .iter()
            .map(|&v| {
                let r = v.round();
                if (0.0..=255.0).contains(&r) {
                    Ok(r as u8)
                } else {
                    Err(Error::Validation(format!("raster value {v} out of range")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Raster { shape, data })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&self.shape, self.data.iter().map(|&v| v as f64).collect()).expect("shape matches")
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn n_bins(&self) -> usize {
        self.shape[0]
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn index(&self, b: usize, p: usize, y: usize, x: usize) -> usize {
        let [_, np, h, w] = self.shape;
        ((b * np + p) * h + y) * w + x
    }

    pub fn get(&self, b: usize, p: usize, y: usize, x: usize) -> u8 {
        self.data[self.index(b, p, y, x)]
    }

    pub fn set(&mut self, b: usize, p: usize, y: usize, x: usize, v: u8) {
        let i = self.index(b, p, y, x);
        self.data[i] = v;
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Voxels whose values differ (the L0 distance).
    pub fn l0_distance(&self, other: &Raster) -> usize {
        self.data.iter().zip(&other.data).filter(|(a, b)| a != b).count()
    }
}

/// Bins the events in `[t_start, t_start + duration_us)` into a `[T, P, H, W]`
/// raster, capping each voxel at `max_per_cell`.
pub fn rasterize(events: &EventList, cfg: &RasterConfig, t_start: u64) -> Result<Raster> {
    cfg.validate()?;
    let sensor = events.sensor();
    let shape = [cfg.n_bins, cfg.n_polarities, sensor.height as usize, sensor.width as usize];
    let mut raster = Raster::zeros(shape);
    for e in events.events() {
        let Some(dt) = e.t.checked_sub(t_start) else {
            continue;
        };
        let Some(bin) = cfg.bin_of(dt) else {
            continue;
        };
        let p = e.p as usize;
        if p >= cfg.n_polarities {
            continue;
        }
        let i = raster.index(bin, p, e.y as usize, e.x as usize);
        if raster.data[i] < cfg.max_per_cell {
            raster.data[i] += 1;
        }
    }
    Ok(raster)
}

/// What to do with voxels the attack decremented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum RemovalPolicy {
    /// Keep the original events; only additions are transferred.
    #[default]
    Ignore,
    /// Delete one matching original event per decremented count, latest first.
    Honor,
}

/// Merges the events an attack added into the original stream. New events
/// are stamped at the centre of their bin.
pub fn raster_to_new_events(
    original: &EventList,
    original_raster: &Raster,
    adv_raster: &Raster,
    cfg: &RasterConfig,
    t_start: u64,
    removals: RemovalPolicy,
) -> Result<EventList> {
    cfg.validate()?;
    if original_raster.shape() != adv_raster.shape() {
        return Err(Error::Shape { expected: original_raster.shape().to_vec(), actual: adv_raster.shape().to_vec() });
    }
    let sensor = original.sensor();
    let expected = [cfg.n_bins, cfg.n_polarities, sensor.height as usize, sensor.width as usize];
    if original_raster.shape() != expected {
        return Err(Error::Shape { expected: expected.to_vec(), actual: original_raster.shape().to_vec() });
    }

    let [n_bins, n_pol, h, w] = expected;
    let mut added = Vec::new();
    let mut to_remove: Vec<(usize, usize, usize, usize, u8)> = Vec::new();
    for b in 0..n_bins {
        let t = t_start + cfg.bin_center(b);
        for p in 0..n_pol {
            for y in 0..h {
                for x in 0..w {
                    let before = original_raster.get(b, p, y, x);
                    let after = adv_raster.get(b, p, y, x);
                    if after > before {
                        for _ in 0..(after - before) {
                            added.push(Event { t, x: x as u32, y: y as u32, p: p as u8 });
                        }
                    } else if after < before && removals == RemovalPolicy::Honor {
                        to_remove.push((b, p, y, x, before - after));
                    }
                }
            }
        }
    }

    let mut keep = vec![true; original.len()];
    for (b, p, y, x, n) in to_remove {
        let mut remaining = n;
        for (i, e) in original.events().iter().enumerate().rev() {
            if remaining == 0 {
                break;
            }
            if !keep[i] || e.p as usize != p || e.x as usize != x || e.y as usize != y {
                continue;
            }
            let in_bin = e.t.checked_sub(t_start).and_then(|dt| cfg.bin_of(dt)).is_some_and(|bin| bin == b);
            if in_bin {
                keep[i] = false;
                remaining -= 1;
            }
        }
    }

    let mut events: Vec<Event> = original.events().iter().zip(&keep).filter_map(|(e, &k)| k.then_some(*e)).collect();
    events.extend(added);
    events.sort_by_key(|e| e.t);
    Ok(EventList { events, sensor })
}

/// A strictly binary `[1, H, W]` image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl BinaryImage {
    /// As a single-bin, single-polarity raster `[1, 1, H, W]`.
    pub fn to_raster(&self) -> Raster {
        Raster { shape: [1, 1, self.height, self.width], data: self.data.clone() }
    }
}

/// Maps gray levels 0..=127 to 0 and 128..=255 to 1.
pub fn binarize_image(gray: &Tensor) -> Result<BinaryImage> {
    let [c, h, w]: [usize; 3] = gray
        .shape()
        .try_into()
        .map_err(|_| Error::Validation(format!("expected [1, H, W] image, got {:?}", gray.shape())))?;
    if c != 1 {
        return Err(Error::Validation(format!("expected one channel, got {c}")));
    }
    let data = gray
        .data()
        .iter()
        .map(|&v| {
            if !(0.0..=255.0).contains(&v) {
                Err(Error::Validation(format!("pixel value {v} outside [0, 255]")))
            } else {
                Ok(u8::from(v > 127.0))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BinaryImage { height: h, width: w, data })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub raster: Raster,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub n_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset { n_classes: self.n_classes, samples: indices.iter().map(|&i| self.samples[i].clone()).collect() }
    }
}
