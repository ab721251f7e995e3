//! The fused classifier: GAP features of both backbones are concatenated and
//! fed through a one-hidden-layer head ending in softmax.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{build_backbone, he_normal, Backbone, BackboneConfig, Param};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{argmax, Tape, Tensor, Var};

/// Which backbone a feature branch comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Branch {
    /// VGG-like branch.
    A,
    /// Dense-like branch.
    B,
}

impl Branch {
    pub fn tag(self) -> &'static str {
        match self {
            Branch::A => "a",
            Branch::B => "b",
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" | "A" => Ok(Branch::A),
            "b" | "B" => Ok(Branch::B),
            other => Err(Error::Config(format!("unknown branch `{other}` (expected a or b)"))),
        }
    }
}

/// Everything needed to rebuild a [`FusionModel`] from scratch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// `None` drops the branch (single-backbone ablation).
    pub branch_a: Option<BackboneConfig>,
    pub branch_b: Option<BackboneConfig>,
    pub hidden: usize,
    pub dropout_rate: f64,
    pub class_names: Vec<String>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel {
    spec: ModelSpec,
    branches: Vec<(Branch, Backbone)>,
    head: Vec<Param>,
    input_channels: usize,
    input_size: usize,
}

/// Handles produced by one [`FusionModel::forward`] call.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// Pre-softmax class scores, `[N, C]`.
    pub logits: Var,
    /// Softmax output, `[N, C]`.
    pub probs: Var,
    /// Fused feature vector, `[N, d_a + d_b]`.
    pub features: Var,
    /// Final feature maps of each branch.
    pub branch_maps: Vec<(Branch, Var)>,
    /// Parameter handles, in [`FusionModel::params`] order.
    pub params: Vec<Var>,
}

impl ForwardPass {
    pub fn maps(&self, branch: Branch) -> Option<Var> {
        self.branch_maps.iter().find(|(b, _)| *b == branch).map(|(_, v)| *v)
    }
}

/// Builds the two-branch model with a `hidden`-wide head over `classes`.
pub fn build_dggxnet(
    cfg_a: &BackboneConfig,
    cfg_b: &BackboneConfig,
    hidden: usize,
    classes: &[String],
    dropout_rate: f64,
    seed: u64,
) -> Result<FusionModel> {
    FusionModel::build(ModelSpec {
        branch_a: Some(cfg_a.clone()),
        branch_b: Some(cfg_b.clone()),
        hidden,
        dropout_rate,
        class_names: classes.to_vec(),
        seed,
    })
}

impl FusionModel {
    pub fn build(spec: ModelSpec) -> Result<Self> {
        if spec.class_names.len() < 2 {
            return Err(Error::Config(format!(
                "a classifier needs at least two classes, got {}",
                spec.class_names.len()
            )));
        }
        if spec.hidden == 0 {
            return Err(Error::Config("head hidden width must be positive".into()));
        }
        if !(0.0..1.0).contains(&spec.dropout_rate) {
            return Err(Error::Config(format!("dropout rate must lie in [0, 1), got {}", spec.dropout_rate)));
        }
        let mut branches = Vec::new();
        for (branch, cfg) in [(Branch::A, &spec.branch_a), (Branch::B, &spec.branch_b)] {
            if let Some(cfg) = cfg {
                let mut bb = build_backbone(cfg)?;
                bb.prefix_names(branch.tag());
                branches.push((branch, bb));
            }
        }
        let Some((_, first)) = branches.first() else {
            return Err(Error::Config("model needs at least one backbone".into()));
        };
        let (input_channels, input_size) = (first.config().input_channels, first.config().input_size);
        for (b, bb) in &branches {
            let c = bb.config();
            if c.input_channels != input_channels || c.input_size != input_size {
                return Err(Error::Config(format!(
                    "branch {b} expects {}x{}x{} input but branch a expects {input_channels}x{input_size}x{input_size}",
                    c.input_channels, c.input_size, c.input_size
                )));
            }
        }
        let width: usize = branches.iter().map(|(_, b)| b.feature_width()).sum();
        let classes = spec.class_names.len();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let head = vec![
            trainable("head.fc1.weight", he_normal(&mut rng, &[spec.hidden, width], width as f64)),
            trainable("head.fc1.bias", Tensor::zeros(&[spec.hidden])),
            trainable("head.fc2.weight", he_normal(&mut rng, &[classes, spec.hidden], spec.hidden as f64)),
            trainable("head.fc2.bias", Tensor::zeros(&[classes])),
        ];
        Ok(Self { spec, branches, head, input_channels, input_size })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn class_names(&self) -> &[String] {
        &self.spec.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.spec.class_names.len()
    }

    /// `(channels, size)` of the square input images.
    pub fn input_spec(&self) -> (usize, usize) {
        (self.input_channels, self.input_size)
    }

    pub fn backbone(&self, branch: Branch) -> Option<&Backbone> {
        self.branches.iter().find(|(b, _)| *b == branch).map(|(_, bb)| bb)
    }

    pub fn branches(&self) -> impl Iterator<Item = Branch> + '_ {
        self.branches.iter().map(|(b, _)| *b)
    }

    /// Width of the fused feature vector.
    pub fn feature_width(&self) -> usize {
        self.branches.iter().map(|(_, b)| b.feature_width()).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.branches.iter().flat_map(|(_, b)| b.params().iter()).chain(self.head.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.branches.iter_mut().flat_map(|(_, b)| b.params_mut().iter_mut()).chain(self.head.iter_mut())
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params().find(|p| p.name == name)
    }

    /// Copies of every parameter value, in [`FusionModel::params`] order.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, values: &[Tensor]) -> Result<()> {
        let count = self.params().count();
        if values.len() != count {
            return Err(Error::State(format!(
                "snapshot holds {} tensors, model has {count} parameters",
                values.len()
            )));
        }
        for (p, v) in self.params_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::State(format!(
                    "snapshot shape {:?} does not fit parameter {} {:?}",
                    v.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
        }
        for (p, v) in self.params_mut().zip(values) {
            p.value = v.clone();
        }
        Ok(())
    }

    /// Sets the trainable flag of every parameter whose name satisfies
    /// `pattern`; returns how many matched. Frozen parameters still pass
    /// gradients through but are skipped by the optimizer.
    pub fn set_trainable_mask(&mut self, pattern: impl Fn(&str) -> bool, trainable: bool) -> usize {
        let mut hits = 0;
        for p in self.params_mut() {
            if pattern(&p.name) {
                p.trainable = trainable;
                hits += 1;
            }
        }
        if hits == 0 {
            log::warn!("trainable mask pattern matched no parameters");
        }
        hits
    }

    /// Fused forward pass on `[N, C, S, S]` input. `rng` enables dropout
    /// (training mode); `None` is evaluation mode and fully deterministic.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        requires_grad: bool,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardPass> {
        let shape = tape.try_value(x)?.shape().to_vec();
        let want = [self.input_channels, self.input_size, self.input_size];
        if shape.len() != 4 || shape[1..] != want {
            return Err(shape_err!(
                "model expects [N, {}, {}, {}] input, got {:?}",
                want[0],
                want[1],
                want[2],
                shape
            ));
        }
        let mut params = Vec::new();
        let mut branch_maps = Vec::new();
        let mut features: Option<Var> = None;
        for (branch, bb) in &self.branches {
            let out = bb.forward(tape, x, requires_grad)?;
            params.extend(out.params);
            branch_maps.push((*branch, out.maps));
            features = Some(match features {
                None => out.gap,
                Some(f) => tape.concat_channels(f, out.gap)?,
            });
        }
        let features = features.expect("at least one branch");
        let head: Vec<Var> = self.head.iter().map(|p| tape.leaf(p.value.clone(), requires_grad)).collect();
        let hidden = tape.linear(features, head[0], head[1])?;
        let hidden = tape.relu(hidden)?;
        let hidden = tape.dropout(hidden, self.spec.dropout_rate, rng)?;
        let logits = tape.linear(hidden, head[2], head[3])?;
        let probs = tape.softmax(logits)?;
        params.extend(head);
        Ok(ForwardPass { logits, probs, features, branch_maps, params })
    }

    /// Evaluation-mode class probabilities for a batch `[N, C, S, S]`.
    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let fp = self.forward(&mut tape, v, false, None)?;
        Ok(tape.value(fp.probs).clone())
    }

    /// Predicted class (first index on ties) and probabilities for a single
    /// image `[C, S, S]` or `[1, C, S, S]`.
    pub fn predict(&self, image: &Tensor) -> Result<(usize, Vec<f64>)> {
        let batch = if image.rank() == 3 {
            let mut shape = vec![1];
            shape.extend_from_slice(image.shape());
            image.clone().reshape(&shape)?
        } else {
            image.clone()
        };
        if batch.shape().first() != Some(&1) {
            return Err(shape_err!("predict takes a single image, got {:?}", image.shape()));
        }
        let probs = self.probabilities(&batch)?.into_data();
        Ok((argmax(&probs), probs))
    }
}

fn trainable(name: &str, value: Tensor) -> Param {
    Param { name: name.to_string(), value, trainable: true }
}

/// Deterministic pseudo-random image batch, handy for tests and probes.
pub fn random_input(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f64>()).collect()).expect("shape matches data")
}
