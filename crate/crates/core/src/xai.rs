//! Gradient-based explanations: Grad-CAM on a branch's final feature maps and
//! Integrated Gradients on the input, both targeting a pre-softmax logit.

use std::fmt;
use std::path::Path;

use crate::data::pnm::quantize;
use crate::data::{normalize_minmax, resize_bilinear, GrayImage, PnmImage, Volume};
use crate::error::{param_err, shape_err, Error, Result};
use crate::model::{Branch, FusionModel};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    GradCam,
    IntegratedGradients,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::GradCam => "gradcam",
            Method::IntegratedGradients => "ig",
        })
    }
}

/// A single-image 2-D attribution.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    pub values: GrayImage,
    pub method: Method,
    pub target_class: usize,
    /// Set for Grad-CAM maps.
    pub branch: Option<Branch>,
}

impl AttributionMap {
    /// Stores the raw values as a one-slice volume.
    pub fn write_raw(&self, path: &Path) -> Result<()> {
        let v = &self.values;
        let voxels = v.pixels().iter().map(|&x| x as f32).collect();
        Volume::new(1, v.height(), v.width(), voxels)?.write(path)
    }
}

fn as_batch(model: &FusionModel, x: &Tensor) -> Result<Tensor> {
    let (c, s) = model.input_spec();
    match x.shape() {
        [ch, h, w] if [*ch, *h, *w] == [c, s, s] => x.clone().reshape(&[1, c, s, s]),
        [1, ch, h, w] if [*ch, *h, *w] == [c, s, s] => Ok(x.clone()),
        other => Err(shape_err!("expected a single [{c}, {s}, {s}] image, got {other:?}")),
    }
}

fn check_class(model: &FusionModel, class: usize) -> Result<()> {
    if class >= model.num_classes() {
        return Err(param_err!("class {class} out of range for a {}-class model", model.num_classes()));
    }
    Ok(())
}

/// Grad-CAM from activations `[1, K, h, w]` and the gradient of the target
/// score with respect to them: `ReLU(Σ_k α_k A_k)` with `α_k` the spatial
/// mean of the gradient of map `k`.
pub fn grad_cam_from_activations(maps: &Tensor, grads: &Tensor) -> Result<GrayImage> {
    let s = maps.shape();
    if s.len() != 4 || s[0] != 1 || grads.shape() != s {
        return Err(shape_err!(
            "Grad-CAM needs matching [1, K, h, w] maps and gradients, got {:?} and {:?}",
            s,
            grads.shape()
        ));
    }
    let (k, h, w) = (s[1], s[2], s[3]);
    let z = h * w;
    let mut cam = vec![0.0; z];
    for ch in 0..k {
        let a = &maps.data()[ch * z..(ch + 1) * z];
        let g = &grads.data()[ch * z..(ch + 1) * z];
        let alpha = g.iter().sum::<f64>() / z as f64;
        for (c, &av) in cam.iter_mut().zip(a) {
            *c += alpha * av;
        }
    }
    for c in &mut cam {
        *c = c.max(0.0);
    }
    GrayImage::new(h, w, cam)
}

/// Grad-CAM computed on any tape: differentiates `score` (one element) and
/// combines the gradient at `maps` with its activations.
pub fn grad_cam_on_tape(tape: &mut Tape, maps: Var, score: Var) -> Result<GrayImage> {
    tape.backward(score)?;
    let grads = tape.grad_or_zeros(maps);
    grad_cam_from_activations(tape.try_value(maps)?, &grads)
}

/// Grad-CAM for class `class` on the final feature maps of `branch`, at
/// feature-map resolution.
pub fn grad_cam(model: &FusionModel, x: &Tensor, class: usize, branch: Branch) -> Result<AttributionMap> {
    check_class(model, class)?;
    if model.backbone(branch).is_none() {
        return Err(param_err!("model has no branch {branch}"));
    }
    let batch = as_batch(model, x)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(batch, true);
    let fp = model.forward(&mut tape, xv, false, None)?;
    let maps = fp.maps(branch).expect("branch present");
    let score = tape.column_sum(fp.logits, class)?;
    let values = grad_cam_on_tape(&mut tape, maps, score)?;
    Ok(AttributionMap { values, method: Method::GradCam, target_class: class, branch: Some(branch) })
}

#[derive(Clone, Debug, PartialEq)]
pub struct IgConfig {
    /// `None` means the all-zero image.
    pub baseline: Option<Tensor>,
    pub steps: usize,
    /// Path points evaluated per forward/backward pass.
    pub batch: usize,
}

impl Default for IgConfig {
    fn default() -> Self {
        Self { baseline: None, steps: 50, batch: 16 }
    }
}

/// Pre-softmax logit of `class` for a single image, evaluation mode.
pub fn class_logit(model: &FusionModel, x: &Tensor, class: usize) -> Result<f64> {
    check_class(model, class)?;
    let batch = as_batch(model, x)?;
    let mut tape = Tape::new();
    let xv = tape.constant(batch);
    let fp = model.forward(&mut tape, xv, false, None)?;
    Ok(tape.value(fp.logits).data()[class])
}

/// Integrated Gradients, midpoint rule: per input element
/// `(x − x′) · (1/m) · Σ_s ∂F_c(x′ + ((s − ½)/m)(x − x′))/∂x`.
/// Returns the per-element attributions with the input's `[C, H, W]` shape.
pub fn integrated_gradients_raw(
    model: &FusionModel,
    x: &Tensor,
    class: usize,
    cfg: &IgConfig,
) -> Result<Tensor> {
    check_class(model, class)?;
    if cfg.steps == 0 {
        return Err(param_err!("integrated gradients needs at least one step"));
    }
    let input = as_batch(model, x)?;
    let baseline = match &cfg.baseline {
        None => Tensor::zeros(input.shape()),
        Some(b) => as_batch(model, b)
            .map_err(|_| shape_err!("baseline shape {:?} does not match input {:?}", b.shape(), x.shape()))?,
    };
    let per = input.numel();
    let diff: Vec<f64> = input.data().iter().zip(baseline.data()).map(|(a, b)| a - b).collect();
    let m = cfg.steps;
    let mut grad_sum = vec![0.0; per];
    let mut s = 0;
    while s < m {
        let n = cfg.batch.max(1).min(m - s);
        let mut path = Vec::with_capacity(n * per);
        for j in 0..n {
            let t = ((s + j) as f64 + 0.5) / m as f64;
            path.extend(baseline.data().iter().zip(&diff).map(|(b, d)| b + t * d));
        }
        let mut shape = input.shape().to_vec();
        shape[0] = n;
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::new(shape, path)?, true);
        let fp = model.forward(&mut tape, xv, false, None)?;
        // samples are independent, so the gradient of the summed logit
        // holds each path point's own gradient
        let score = tape.column_sum(fp.logits, class)?;
        tape.backward(score)?;
        let g = tape.grad_or_zeros(xv);
        for row in g.data().chunks(per) {
            for (acc, v) in grad_sum.iter_mut().zip(row) {
                *acc += v;
            }
        }
        s += n;
    }
    let attr = grad_sum.iter().zip(&diff).map(|(g, d)| d * g / m as f64).collect();
    let mut shape = input.shape().to_vec();
    shape.remove(0);
    Tensor::new(shape, attr)
}

/// Integrated Gradients summed over channels, at input resolution.
pub fn integrated_gradients(
    model: &FusionModel,
    x: &Tensor,
    class: usize,
    cfg: &IgConfig,
) -> Result<AttributionMap> {
    let raw = integrated_gradients_raw(model, x, class, cfg)?;
    let (c, h, w) = (raw.shape()[0], raw.shape()[1], raw.shape()[2]);
    let mut plane = vec![0.0; h * w];
    for ch in 0..c {
        for (p, v) in plane.iter_mut().zip(&raw.data()[ch * h * w..(ch + 1) * h * w]) {
            *p += v;
        }
    }
    Ok(AttributionMap {
        values: GrayImage::new(h, w, plane)?,
        method: Method::IntegratedGradients,
        target_class: class,
        branch: None,
    })
}

/// Bilinear resize followed by min-max normalization to `[0, 1]`.
pub fn upsample_heatmap(map: &AttributionMap, out_h: usize, out_w: usize) -> Result<AttributionMap> {
    let resized = resize_bilinear(&map.values, out_h, out_w)?;
    Ok(AttributionMap {
        values: GrayImage::new(out_h, out_w, normalize_minmax(resized.pixels()))?,
        ..map.clone()
    })
}

/// Blue (0) to red (1) colormap.
pub fn colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [v, 0.0, 1.0 - v]
}

/// `(1 − α)·gray + α·colormap(heat)` as an 8-bit color image. `base` is a
/// `[C, H, W]` image in `[0, 1]`; channels are averaged to gray.
pub fn render_overlay(base: &Tensor, heat: &GrayImage, alpha: f64) -> Result<PnmImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(param_err!("overlay alpha {alpha} outside [0, 1]"));
    }
    let s = base.shape();
    if s.len() != 3 || s[1] != heat.height() || s[2] != heat.width() {
        return Err(shape_err!(
            "overlay base {:?} does not match heatmap {}x{}",
            s,
            heat.height(),
            heat.width()
        ));
    }
    let (c, hw) = (s[0], s[1] * s[2]);
    let mut data = Vec::with_capacity(hw * 3);
    for i in 0..hw {
        let gray = (0..c).map(|ch| base.data()[ch * hw + i]).sum::<f64>() / c as f64;
        let color = colormap(heat.pixels()[i]);
        for v in color {
            data.push(quantize((1.0 - alpha) * gray + alpha * v));
        }
    }
    Ok(PnmImage::rgb(s[2], s[1], data))
}

/// Convenience check used by callers that accept a user-supplied class.
pub fn resolve_class(model: &FusionModel, requested: Option<usize>, x: &Tensor) -> Result<usize> {
    match requested {
        Some(c) => check_class(model, c).map(|_| c),
        None => Ok(model.predict(x)?.0),
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradcam" | "grad-cam" => Ok(Method::GradCam),
            "ig" | "integrated-gradients" => Ok(Method::IntegratedGradients),
            other => Err(Error::Config(format!("unknown attribution method `{other}`"))),
        }
    }
}
