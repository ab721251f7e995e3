//! Flat `key = value` run configuration with `#` comments. Every key has a
//! default; unknown keys are rejected.

use std::fmt::Write as _;
use std::path::Path;

use crate::backbone::BackboneConfig;
use crate::data::LoadOptions;
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::train::{AdamHyper, TrainConfig};
use crate::xai::IgConfig;

/// A value that can live in a config file.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! scalar_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

scalar_value!(usize, u64, f64, String);

impl ConfigValue for Vec<usize> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s.trim().is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|p| p.trim().parse().map_err(|e| format!("{e}"))).collect()
    }
    fn render(&self) -> String {
        self.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

macro_rules! run_config {
    ($($field:ident : $ty:ty = $default:expr => $key:literal;)*) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $(pub $field: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($field: $default,)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            /// Assigns one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => {
                        self.$field = <$ty as ConfigValue>::parse_value(value).map_err(|e| {
                            Error::Config(format!("bad value `{value}` for key `{key}`: {e}"))
                        })?;
                    })*
                    other => return Err(Error::Config(format!("unknown config key `{other}`"))),
                }
                Ok(())
            }

            /// Every key with its current value, in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, ConfigValue::render(&self.$field))),*]
            }
        }
    };
}

run_config! {
    data_size: usize = 32 => "data.size";
    data_channels: usize = 1 => "data.channels";
    data_seed: u64 = 7 => "data.seed";
    train_fraction: f64 = 0.7 => "data.train_fraction";
    val_fraction: f64 = 0.2 => "data.val_fraction";
    test_fraction: f64 = 0.1 => "data.test_fraction";
    branch_a_widths: Vec<usize> = vec![8, 16, 32] => "backbone.a.widths";
    branch_b_stem: usize = 8 => "backbone.b.stem";
    branch_b_growth: usize = 6 => "backbone.b.growth";
    branch_b_blocks: Vec<usize> = vec![2, 2] => "backbone.b.blocks";
    branch_b_compression: f64 = 0.5 => "backbone.b.compression";
    branches: String = "ab".to_string() => "model.branches";
    hidden: usize = 64 => "model.hidden";
    dropout: f64 = 0.3 => "model.dropout";
    model_seed: u64 = 11 => "model.seed";
    epochs: usize = 30 => "train.epochs";
    batch_size: usize = 32 => "train.batch_size";
    learning_rate: f64 = 1e-4 => "train.learning_rate";
    beta1: f64 = 0.9 => "train.beta1";
    beta2: f64 = 0.999 => "train.beta2";
    epsilon: f64 = 1e-8 => "train.epsilon";
    patience: usize = 5 => "train.patience";
    train_seed: u64 = 13 => "train.seed";
    freeze: String = String::new() => "train.freeze";
    ig_steps: usize = 50 => "xai.ig_steps";
    ig_batch: usize = 16 => "xai.ig_batch";
    overlay_alpha: f64 = 0.5 => "xai.overlay_alpha";
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{raw}`", n + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Path(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::parse(&text)
    }

    /// Serializes every key, so the output parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_size == 0 || self.data_channels == 0 {
            return Err(Error::Config("data.size and data.channels must be positive".into()));
        }
        if !matches!(self.branches.as_str(), "a" | "b" | "ab") {
            return Err(Error::Config(format!("model.branches must be a, b or ab, got `{}`", self.branches)));
        }
        if self.ig_steps == 0 {
            return Err(Error::Config("xai.ig_steps must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.overlay_alpha) {
            return Err(Error::Config("xai.overlay_alpha must lie in [0, 1]".into()));
        }
        self.train_config().validate()?;
        crate::data::split_counts(1, self.fractions()).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn fractions(&self) -> [f64; 3] {
        [self.train_fraction, self.val_fraction, self.test_fraction]
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions { size: self.data_size, channels: self.data_channels }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            patience: self.patience,
            seed: self.train_seed,
            adam: AdamHyper {
                learning_rate: self.learning_rate,
                beta1: self.beta1,
                beta2: self.beta2,
                epsilon: self.epsilon,
            },
        }
    }

    pub fn ig_config(&self) -> IgConfig {
        IgConfig { baseline: None, steps: self.ig_steps, batch: self.ig_batch }
    }

    /// Parameter-name prefixes to freeze, from the comma-separated
    /// `train.freeze` value.
    pub fn freeze_prefixes(&self) -> Vec<&str> {
        self.freeze.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
    }

    pub fn model_spec(&self, class_names: Vec<String>) -> ModelSpec {
        let (c, s) = (self.data_channels, self.data_size);
        let a = BackboneConfig::vgg(c, s, self.branch_a_widths.clone(), self.model_seed.wrapping_add(1));
        let b = BackboneConfig::dense(
            c,
            s,
            self.branch_b_stem,
            self.branch_b_growth,
            self.branch_b_blocks.clone(),
            self.branch_b_compression,
            self.model_seed.wrapping_add(2),
        );
        ModelSpec {
            branch_a: self.branches.contains('a').then_some(a),
            branch_b: self.branches.contains('b').then_some(b),
            hidden: self.hidden,
            dropout_rate: self.dropout,
            class_names,
            seed: self.model_seed,
        }
    }
}
