//! IDX (MNIST) readers for the binarized-MNIST pipeline.

use std::fs;
use std::path::Path;

use super::{binarize_image, Dataset, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::parse(format!("offset {offset}"), "truncated IDX header"))
}

/// Reads an `idx3-ubyte` file into `[1, H, W]` gray-level tensors.
pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if be_u32(&bytes, 0)? != 0x0000_0803 {
        return Err(Error::parse("offset 0", "not an idx3-ubyte image file"));
    }
    let n = be_u32(&bytes, 4)? as usize;
    let h = be_u32(&bytes, 8)? as usize;
    let w = be_u32(&bytes, 12)? as usize;
    let body = &bytes[16..];
    if body.len() != n * h * w {
        return Err(Error::parse("offset 16", "image payload length mismatch"));
    }
    Ok(body
        .chunks_exact(h * w)
        .map(|px| Tensor::from_vec(&[1, h, w], px.iter().map(|&v| v as f64).collect()).expect("chunk matches shape"))
        .collect())
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if be_u32(&bytes, 0)? != 0x0000_0801 {
        return Err(Error::parse("offset 0", "not an idx1-ubyte label file"));
    }
    let n = be_u32(&bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::parse("offset 8", "label payload length mismatch"));
    }
    Ok(body.iter().map(|&v| v as usize).collect())
}

/// Binarized images as single-bin rasters. `stride` keeps every
/// `stride`-th sample, so 10 gives a 10% subsample.
pub fn load_binarized_mnist(images: impl AsRef<Path>, labels: impl AsRef<Path>, stride: usize) -> Result<Dataset> {
    let imgs = load_idx_images(images)?;
    let labs = load_idx_labels(labels)?;
    if imgs.len() != labs.len() {
        return Err(Error::Validation(format!("{} images but {} labels", imgs.len(), labs.len())));
    }
    let samples = imgs
        .iter()
        .zip(&labs)
        .step_by(stride.max(1))
        .map(|(img, &label)| Ok(Sample { raster: binarize_image(img)?.to_raster(), label }))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { n_classes: 10, samples })
}
