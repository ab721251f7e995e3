//! Raw volume files and axial slice extraction.
//!
//! Layout: the magic `VOL1`, three little-endian `u32` extents `D, H, W`,
//! then `D·H·W` little-endian `f32` voxels, slice-major.

use std::fs;
use std::path::Path;

use crate::error::{param_err, shape_err, Error, Result};

use super::image::GrayImage;

const MAGIC: &[u8; 4] = b"VOL1";

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub voxels: Vec<f32>,
}

impl Volume {
    pub fn new(depth: usize, height: usize, width: usize, voxels: Vec<f32>) -> Result<Self> {
        if voxels.len() != depth * height * width {
            return Err(shape_err!(
                "volume {depth}x{height}x{width} needs {} voxels, got {}",
                depth * height * width,
                voxels.len()
            ));
        }
        Ok(Self { depth, height, width, voxels })
    }

    pub fn slice(&self, index: usize) -> GrayImage {
        let plane = self.height * self.width;
        let pixels = self.voxels[index * plane..(index + 1) * plane].iter().map(|&v| f64::from(v)).collect();
        GrayImage::new(self.height, self.width, pixels).expect("plane size")
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.voxels.len());
        out.extend_from_slice(MAGIC);
        for e in [self.depth, self.height, self.width] {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in &self.voxels {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a VOL1 volume".into()));
        }
        let ext = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (d, h, w) = (ext(0), ext(1), ext(2));
        let count = d
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| Error::Format("volume extents overflow".into()))?;
        let payload = &bytes[16..];
        if payload.len() != count * 4 {
            return Err(Error::Format(format!(
                "volume payload has {} bytes, expected {}",
                payload.len(),
                count * 4
            )));
        }
        let voxels = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Self::new(d, h, w, voxels)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }
}

/// Midpoint-rule slice indices `floor((i + 0.5)·D/k)` for `i in 0..k`.
pub fn axial_slice_indices(depth: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > depth {
        return Err(param_err!("cannot take {k} slices from a depth-{depth} volume"));
    }
    Ok((0..k).map(|i| ((2 * i + 1) * depth) / (2 * k)).collect())
}

/// `k` evenly spaced axial slices.
pub fn extract_axial_slices(v: &Volume, k: usize) -> Result<Vec<GrayImage>> {
    Ok(axial_slice_indices(v.depth, k)?.into_iter().map(|i| v.slice(i)).collect())
}
