//! Single-plane images and the per-image preprocessing steps.

use crate::error::{param_err, shape_err, Result};
use crate::tensor::Tensor;

/// Row-major grayscale image of `f64` intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(shape_err!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            ));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, pixels: vec![value; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }
}

/// Bilinear resize with half-pixel centers: the source coordinate of output
/// pixel `d` is `(d + 0.5)·(in/out) − 0.5`, clamped to the image.
pub fn resize_bilinear(img: &GrayImage, out_h: usize, out_w: usize) -> Result<GrayImage> {
    if out_h == 0 || out_w == 0 {
        return Err(param_err!("resize target {out_h}x{out_w} must be positive"));
    }
    if img.height == 0 || img.width == 0 {
        return Err(param_err!("cannot resize an empty image"));
    }
    if out_h == img.height && out_w == img.width {
        return Ok(img.clone());
    }
    let ys = axis_taps(img.height, out_h);
    let xs = axis_taps(img.width, out_w);
    let mut pixels = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = img.get(y0, x0) * (1.0 - fx) + img.get(y0, x1) * fx;
            let bottom = img.get(y1, x0) * (1.0 - fx) + img.get(y1, x1) * fx;
            pixels.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    GrayImage::new(out_h, out_w, pixels)
}

fn axis_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    let last = (input - 1) as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// `(v − min)/(max − min)`; a constant input maps to all zeros.
pub fn normalize_minmax(values: &[f64]) -> Vec<f64> {
    let (lo, hi) =
        values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if values.is_empty() || range <= 0.0 || !range.is_finite() {
        return vec![0.0; values.len()];
    }
    values.iter().map(|&v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
}

impl GrayImage {
    pub fn normalized(&self) -> GrayImage {
        GrayImage { height: self.height, width: self.width, pixels: normalize_minmax(&self.pixels) }
    }
}

/// Replicates a grayscale plane into a `[channels, H, W]` tensor.
pub fn to_model_channels(img: &GrayImage, channels: usize) -> Tensor {
    let mut data = Vec::with_capacity(channels * img.pixels.len());
    for _ in 0..channels {
        data.extend_from_slice(&img.pixels);
    }
    Tensor::new(vec![channels, img.height, img.width], data).expect("replicated planes")
}
