//! Scale-configurable convolutional feature extractors: a VGG-style stack of
//! conv pairs with max-pooling, and a DenseNet-style network of dense blocks
//! joined by compressing transitions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// A named, optionally frozen model parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Architecture {
    VggLike { stage_widths: Vec<usize> },
    DenseLike { stem_channels: usize, growth_rate: usize, block_lengths: Vec<usize>, compression: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_channels: usize,
    pub input_size: usize,
    pub arch: Architecture,
    pub seed: u64,
}

impl BackboneConfig {
    pub fn vgg(input_channels: usize, input_size: usize, stage_widths: Vec<usize>, seed: u64) -> Self {
        Self { input_channels, input_size, arch: Architecture::VggLike { stage_widths }, seed }
    }

    pub fn dense(
        input_channels: usize,
        input_size: usize,
        stem_channels: usize,
        growth_rate: usize,
        block_lengths: Vec<usize>,
        compression: f64,
        seed: u64,
    ) -> Self {
        Self {
            input_channels,
            input_size,
            arch: Architecture::DenseLike { stem_channels, growth_rate, block_lengths, compression },
            seed,
        }
    }

    /// Desk-scale VGG-like default: three stages of widths 8, 16, 32.
    pub fn default_vgg(input_channels: usize, input_size: usize, seed: u64) -> Self {
        Self::vgg(input_channels, input_size, vec![8, 16, 32], seed)
    }

    /// Desk-scale dense-like default: stem 8, growth 6, blocks [2, 2],
    /// compression 0.5.
    pub fn default_dense(input_channels: usize, input_size: usize, seed: u64) -> Self {
        Self::dense(input_channels, input_size, 8, 6, vec![2, 2], 0.5, seed)
    }

    fn downsampling_stages(&self) -> usize {
        match &self.arch {
            Architecture::VggLike { stage_widths } => stage_widths.len(),
            Architecture::DenseLike { block_lengths, .. } => block_lengths.len().saturating_sub(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.input_size == 0 {
            return Err(Error::Config("input channels and size must be positive".into()));
        }
        let factor = 1usize << self.downsampling_stages();
        if !self.input_size.is_multiple_of(factor) {
            return Err(Error::Config(format!(
                "input size {} is not divisible by 2^{} = {factor}",
                self.input_size,
                self.downsampling_stages()
            )));
        }
        match &self.arch {
            Architecture::VggLike { stage_widths } => {
                if stage_widths.is_empty() || stage_widths.contains(&0) {
                    return Err(Error::Config(format!(
                        "vgg stage widths must be non-empty and positive, got {stage_widths:?}"
                    )));
                }
            }
            Architecture::DenseLike { stem_channels, growth_rate, block_lengths, compression } => {
                if *stem_channels == 0 {
                    return Err(Error::Config("dense stem channels must be positive".into()));
                }
                if *growth_rate == 0 {
                    return Err(Error::Config("dense growth rate must be >= 1".into()));
                }
                if block_lengths.is_empty() || block_lengths.contains(&0) {
                    return Err(Error::Config(format!(
                        "dense block lengths must be non-empty and positive, got {block_lengths:?}"
                    )));
                }
                if !(*compression > 0.0 && *compression <= 1.0) {
                    return Err(Error::Config(format!(
                        "dense compression must lie in (0, 1], got {compression}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct ConvRef {
    weight: usize,
    bias: usize,
    stride: usize,
    padding: usize,
}

#[derive(Clone, Debug, PartialEq)]
enum Layer {
    Conv(ConvRef),
    Relu,
    MaxPool(usize),
    AvgPool(usize),
    DenseBlock(Vec<ConvRef>),
}

/// Feature extractor ending in spatial maps that are globally average pooled.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    layers: Vec<Layer>,
    params: Vec<Param>,
    final_layer: String,
    out_channels: usize,
    out_size: usize,
}

/// Result of [`Backbone::forward`].
#[derive(Clone, Debug)]
pub struct BackboneOutput {
    /// Last feature maps, `[N, d, h, w]`; the Grad-CAM target.
    pub maps: Var,
    /// Global average pool of `maps`, `[N, d]`.
    pub gap: Var,
    /// Tape handles of the parameters, in [`Backbone::params`] order.
    pub params: Vec<Var>,
}

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<Param>,
}

impl Builder {
    fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), params: Vec::new() }
    }

    /// He (fan-in) normal weights and zero bias.
    fn conv(&mut self, name: &str, out_c: usize, in_c: usize, k: usize, padding: usize) -> ConvRef {
        let fan_in = (in_c * k * k) as f64;
        let weight = he_normal(&mut self.rng, &[out_c, in_c, k, k], fan_in);
        let w = self.push(format!("{name}.weight"), weight);
        let b = self.push(format!("{name}.bias"), Tensor::zeros(&[out_c]));
        ConvRef { weight: w, bias: b, stride: 1, padding }
    }

    fn push(&mut self, name: String, value: Tensor) -> usize {
        self.params.push(Param { name, value, trainable: true });
        self.params.len() - 1
    }
}

pub(crate) fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: f64) -> Tensor {
    let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Builds a VGG-like backbone: per stage, `[3×3 conv → ReLU] × 2` then a
/// 2×2 max-pool.
pub fn build_mini_vgg(config: &BackboneConfig) -> Result<Backbone> {
    let Architecture::VggLike { stage_widths } = &config.arch else {
        return Err(Error::Config("build_mini_vgg needs a vgg-like config".into()));
    };
    config.validate()?;
    let mut b = Builder::new(config.seed);
    let mut layers = Vec::new();
    let mut in_c = config.input_channels;
    let mut final_layer = String::new();
    for (s, &width) in stage_widths.iter().enumerate() {
        for c in 0..2 {
            let name = format!("stage{s}.conv{c}");
            layers.push(Layer::Conv(b.conv(&name, width, in_c, 3, 1)));
            layers.push(Layer::Relu);
            in_c = width;
            final_layer = name;
        }
        layers.push(Layer::MaxPool(2));
    }
    Ok(Backbone {
        config: config.clone(),
        layers,
        params: b.params,
        final_layer,
        out_channels: in_c,
        out_size: config.input_size >> stage_widths.len(),
    })
}

/// Channel count after a transition with the given compression.
fn compressed(channels: usize, compression: f64) -> usize {
    ((channels as f64 * compression).floor() as usize).max(1)
}

/// Builds a DenseNet-like backbone: a 3×3 stem, then dense blocks separated
/// by transitions (1×1 conv to `compression·C` channels, 2×2 average pool).
pub fn build_mini_densenet(config: &BackboneConfig) -> Result<Backbone> {
    let Architecture::DenseLike { stem_channels, growth_rate, block_lengths, compression } = &config.arch
    else {
        return Err(Error::Config("build_mini_densenet needs a dense-like config".into()));
    };
    config.validate()?;
    let mut b = Builder::new(config.seed);
    let mut layers = vec![Layer::Conv(b.conv("stem", *stem_channels, config.input_channels, 3, 1))];
    let mut channels = *stem_channels;
    let mut final_layer = String::new();
    for (i, &len) in block_lengths.iter().enumerate() {
        let spec = DenseBlockSpec::new(channels, len, *growth_rate)?;
        let convs = (0..len)
            .map(|l| b.conv(&format!("block{i}.layer{l}"), *growth_rate, spec.layer_input_channels(l), 3, 1))
            .collect();
        layers.push(Layer::DenseBlock(convs));
        channels = spec.output_channels();
        final_layer = format!("block{i}");
        if i + 1 < block_lengths.len() {
            let out = compressed(channels, *compression);
            layers.push(Layer::Conv(b.conv(&format!("trans{i}"), out, channels, 1, 0)));
            layers.push(Layer::AvgPool(2));
            channels = out;
        }
    }
    Ok(Backbone {
        config: config.clone(),
        layers,
        params: b.params,
        final_layer,
        out_channels: channels,
        out_size: config.input_size >> config.downsampling_stages(),
    })
}

/// Dispatches on the configured architecture.
pub fn build_backbone(config: &BackboneConfig) -> Result<Backbone> {
    match config.arch {
        Architecture::VggLike { .. } => build_mini_vgg(config),
        Architecture::DenseLike { .. } => build_mini_densenet(config),
    }
}

/// Channel bookkeeping for one dense block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenseBlockSpec {
    pub input_channels: usize,
    pub layers: usize,
    pub growth: usize,
}

impl DenseBlockSpec {
    pub fn new(input_channels: usize, layers: usize, growth: usize) -> Result<Self> {
        if layers < 1 {
            return Err(param_err!("dense block needs at least one layer"));
        }
        if growth < 1 {
            return Err(param_err!("dense block growth must be >= 1"));
        }
        Ok(Self { input_channels, layers, growth })
    }

    pub fn layer_input_channels(&self, layer: usize) -> usize {
        self.input_channels + layer * self.growth
    }

    pub fn output_channels(&self) -> usize {
        self.input_channels + self.layers * self.growth
    }
}

/// Dense block: each layer applies `ReLU → 3×3 conv (pad 1)` to the
/// concatenation of the block input and all earlier layer outputs, and
/// appends its own output.
pub fn dense_block(tape: &mut Tape, input: Var, layers: &[(Var, Var)]) -> Result<Var> {
    if layers.is_empty() {
        return Err(param_err!("dense block needs at least one layer"));
    }
    let mut features = input;
    for &(w, b) in layers {
        let act = tape.relu(features)?;
        let new = tape.conv2d(act, w, b, 1, 1)?;
        features = tape.concat_channels(features, new)?;
    }
    Ok(features)
}

impl Backbone {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Identifier of the layer whose output forms the final maps.
    pub fn final_layer(&self) -> &str {
        &self.final_layer
    }

    /// Channel count of the final maps, which is also the GAP width.
    pub fn feature_width(&self) -> usize {
        self.out_channels
    }

    /// Spatial extent of the (square) final maps.
    pub fn output_size(&self) -> usize {
        self.out_size
    }

    pub(crate) fn prefix_names(&mut self, prefix: &str) {
        for p in &mut self.params {
            p.name = format!("{prefix}.{}", p.name);
        }
    }

    /// Runs the extractor on `[N, C, S, S]` input, recording on `tape`.
    pub fn forward(&self, tape: &mut Tape, x: Var, requires_grad: bool) -> Result<BackboneOutput> {
        let shape = tape.try_value(x)?.shape().to_vec();
        let want = [self.config.input_channels, self.config.input_size, self.config.input_size];
        if shape.len() != 4 || shape[1..] != want {
            return Err(shape_err!(
                "backbone expects [N, {}, {}, {}] input, got {:?}",
                want[0],
                want[1],
                want[2],
                shape
            ));
        }
        let vars: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.value.clone(), requires_grad)).collect();
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                Layer::Conv(c) => tape.conv2d(h, vars[c.weight], vars[c.bias], c.stride, c.padding)?,
                Layer::Relu => tape.relu(h)?,
                Layer::MaxPool(k) => tape.max_pool2d(h, *k, *k)?,
                Layer::AvgPool(k) => tape.avg_pool2d(h, *k, *k)?,
                Layer::DenseBlock(convs) => {
                    let pairs: Vec<(Var, Var)> =
                        convs.iter().map(|c| (vars[c.weight], vars[c.bias])).collect();
                    dense_block(tape, h, &pairs)?
                }
            };
        }
        let gap = tape.global_avg_pool(h)?;
        Ok(BackboneOutput { maps: h, gap, params: vars })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn final_shape(b: &Backbone, n: usize) -> (Vec<usize>, Vec<usize>) {
        let mut tape = Tape::new();
        let c = b.config().input_channels;
        let s = b.config().input_size;
        let x = tape.constant(Tensor::full(&[n, c, s, s], 0.5));
        let out = b.forward(&mut tape, x, false).unwrap();
        (tape.value(out.maps).shape().to_vec(), tape.value(out.gap).shape().to_vec())
    }

    #[test]
    fn vgg_shapes() {
        let b = build_mini_vgg(&BackboneConfig::vgg(1, 32, vec![8, 16], 1)).unwrap();
        assert_eq!(final_shape(&b, 2), (vec![2, 16, 8, 8], vec![2, 16]));
        assert_eq!(b.feature_width(), 16);

        let b = build_mini_vgg(&BackboneConfig::vgg(1, 8, vec![4], 1)).unwrap();
        assert_eq!(final_shape(&b, 1).0, vec![1, 4, 4, 4]);
        assert_eq!(b.final_layer(), "stage0.conv1");
    }

    #[test]
    fn dense_channel_bookkeeping() {
        let cfg = BackboneConfig::dense(1, 32, 8, 4, vec![2, 2], 0.5, 3);
        let b = build_mini_densenet(&cfg).unwrap();
        assert_eq!(final_shape(&b, 1), (vec![1, 16, 16, 16], vec![1, 16]));
        let trans = b.params().iter().find(|p| p.name == "trans0.weight").unwrap();
        assert_eq!(trans.value.shape(), &[8, 16, 1, 1]);

        let cfg = BackboneConfig::dense(1, 16, 8, 4, vec![2, 2], 1.0, 3);
        let b = build_mini_densenet(&cfg).unwrap();
        let trans = b.params().iter().find(|p| p.name == "trans0.weight").unwrap();
        assert_eq!(trans.value.shape(), &[16, 16, 1, 1]);
    }

    #[test]
    fn dense_block_spec_rules() {
        assert_eq!(DenseBlockSpec::new(4, 3, 2).unwrap().output_channels(), 10);
        assert!(matches!(DenseBlockSpec::new(4, 1, 0), Err(Error::Parameter(_))));
        assert!(matches!(DenseBlockSpec::new(4, 0, 2), Err(Error::Parameter(_))));
    }

    #[test]
    fn construction_is_deterministic() {
        let cfg = BackboneConfig::default_vgg(1, 16, 42);
        assert_eq!(build_mini_vgg(&cfg).unwrap(), build_mini_vgg(&cfg).unwrap());
        let cfg = BackboneConfig::default_dense(1, 16, 42);
        assert_eq!(build_mini_densenet(&cfg).unwrap(), build_mini_densenet(&cfg).unwrap());
        let other = BackboneConfig::default_dense(1, 16, 43);
        assert_ne!(build_mini_densenet(&cfg).unwrap(), build_mini_densenet(&other).unwrap());
    }

    #[test]
    fn bad_configs_rejected() {
        let cfg = BackboneConfig::vgg(1, 12, vec![4, 4, 4], 0);
        assert!(matches!(build_mini_vgg(&cfg), Err(Error::Config(_))));
        let cfg = BackboneConfig::dense(1, 32, 8, 0, vec![2], 0.5, 0);
        assert!(matches!(build_mini_densenet(&cfg), Err(Error::Config(_))));
        let cfg = BackboneConfig::dense(1, 32, 8, 2, vec![2], 1.5, 0);
        assert!(matches!(build_mini_densenet(&cfg), Err(Error::Config(_))));
        let vgg = BackboneConfig::default_vgg(1, 32, 0);
        assert!(matches!(build_mini_densenet(&vgg), Err(Error::Config(_))));
    }

    #[test]
    fn zero_input_gives_zero_features() {
        for cfg in [BackboneConfig::default_vgg(1, 16, 5), BackboneConfig::default_dense(1, 16, 5)] {
            let b = build_backbone(&cfg).unwrap();
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::zeros(&[1, 1, 16, 16]));
            let out = b.forward(&mut tape, x, false).unwrap();
            assert!(tape.value(out.gap).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let b = build_backbone(&BackboneConfig::default_vgg(1, 16, 5)).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 16, 16]));
        assert!(matches!(b.forward(&mut tape, x, false), Err(Error::Shape(_))));
    }

    #[test]
    fn gap_matches_pooled_maps() {
        let b = build_backbone(&BackboneConfig::default_dense(1, 16, 9)).unwrap();
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..256).map(|i| ((i * 37 % 101) as f64) / 101.0).collect();
        let x = tape.constant(Tensor::new(vec![1, 1, 16, 16], data).unwrap());
        let out = b.forward(&mut tape, x, false).unwrap();
        let again = tape.global_avg_pool(out.maps).unwrap();
        assert!(tape.value(out.gap).bit_eq(tape.value(again)));
    }

    #[test]
    fn bias_free_conv_is_homogeneous() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..64).map(|i| (i as f64 * 0.21).cos()).collect();
        let x1 = tape.constant(Tensor::new(vec![1, 1, 8, 8], data.clone()).unwrap());
        let x2 =
            tape.constant(Tensor::new(vec![1, 1, 8, 8], data.iter().map(|v| 2.0 * v).collect()).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = tape.constant(he_normal(&mut rng, &[3, 1, 3, 3], 9.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y1 = tape.conv2d(x1, w, b, 1, 1).unwrap();
        let y2 = tape.conv2d(x2, w, b, 1, 1).unwrap();
        for (a, b) in tape.value(y1).data().iter().zip(tape.value(y2).data()) {
            assert_eq!(2.0 * a, *b);
        }
    }
}
