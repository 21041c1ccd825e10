//! Training configuration: flat `key = value` text, named presets and
//! command-line overrides.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::data::DatasetName;
use crate::error::{HffError, Result};
use crate::layers::{Activation, HeadOptions, LossPlacement};
use crate::objectives::LossKind;

/// One entry of the architecture string.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    /// Fully connected layer of the given width.
    Dense { width: usize },
    /// Convolution with `channels` outputs, an optional aux 1x1 projection,
    /// square kernel, stride and zero padding.
    Conv { channels: usize, aux: Option<usize>, kernel: usize, stride: usize, pad: usize },
}

impl LayerSpec {
    fn parse(tok: &str) -> Result<Self> {
        let bad = || {
            HffError::config(format!(
                "arch entry `{tok}`; expected a width like `512` or a conv like `c32`, `c32a64`, `c64k3s1p1a32`"
            ))
        };
        if let Some(rest) = tok.strip_prefix('c') {
            let (mut channels, mut aux, mut kernel, mut stride, mut pad) = (None, None, 3, 1, None);
            let mut key = 'c';
            let mut num = String::new();
            let mut flush = |key: char, num: &str| -> Result<()> {
                let v: usize = num.parse().map_err(|_| bad())?;
                match key {
                    'c' => channels = Some(v),
                    'a' => aux = Some(v),
                    'k' => kernel = v,
                    's' => stride = v,
                    'p' => pad = Some(v),
                    _ => return Err(bad()),
                }
                Ok(())
            };
            for ch in rest.chars() {
                if ch.is_ascii_digit() {
                    num.push(ch);
                } else {
                    flush(key, &num)?;
                    num.clear();
                    key = ch;
                }
            }
            flush(key, &num)?;
            let channels = channels.ok_or_else(bad)?;
            if channels == 0 || kernel == 0 || stride == 0 || aux == Some(0) {
                return Err(bad());
            }
            return Ok(LayerSpec::Conv { channels, aux, kernel, stride, pad: pad.unwrap_or(kernel / 2) });
        }
        match tok.parse::<usize>() {
            Ok(width) if width > 0 => Ok(LayerSpec::Dense { width }),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Dense { width } => write!(f, "{width}"),
            LayerSpec::Conv { channels, aux, kernel, stride, pad } => {
                write!(f, "c{channels}k{kernel}s{stride}p{pad}")?;
                if let Some(a) = aux {
                    write!(f, "a{a}")?;
                }
                Ok(())
            }
        }
    }
}

/// Parses `1024-512-256` or `c32a64-c64a32`. Conv layers must come first.
pub fn parse_arch(s: &str) -> Result<Vec<LayerSpec>> {
    let specs = s.split('-').map(|t| LayerSpec::parse(t.trim())).collect::<Result<Vec<_>>>()?;
    if specs.is_empty() {
        return Err(HffError::config("arch must list at least one layer"));
    }
    let first_dense = specs.iter().position(|l| matches!(l, LayerSpec::Dense { .. }));
    if let Some(i) = first_dense {
        if specs[i..].iter().any(|l| matches!(l, LayerSpec::Conv { .. })) {
            return Err(HffError::config("arch: conv layers must precede dense layers"));
        }
    }
    Ok(specs)
}

pub fn arch_string(specs: &[LayerSpec]) -> String {
    specs.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("-")
}

macro_rules! choice_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const CHOICES: &'static str = concat!($($text, "|"),+);

            pub fn name(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl FromStr for $name {
            type Err = HffError;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(HffError::config(format!(
                        "`{s}`; expected {}", Self::CHOICES.trim_end_matches('|')
                    ))),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

choice_enum!(
    /// Training schedule.
    Mode {
        Greedy => "greedy",
        PerBatchLocal => "per_batch_local",
    }
);

choice_enum!(
    /// Element type used for training and inference.
    Precision {
        F32 => "f32",
        F64 => "f64",
    }
);

choice_enum!(
    /// How FF inference combines per-layer goodness.
    FfAggregation {
        LastLayer => "last",
        SumAll => "sum_all",
        SumExceptFirst => "sum_except_first",
    }
);

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub dataset: DatasetName,
    pub arch: Vec<LayerSpec>,
    pub activation: Activation,
    pub loss_kind: LossKind,
    pub tau: f64,
    /// Prototypes per class.
    pub protos_per_class: usize,
    pub scale_input: bool,
    pub scale_sims: bool,
    pub loss_placement: LossPlacement,
    pub lr: f64,
    pub batch_size: usize,
    /// Total epochs; greedy mode splits them evenly across layers with the
    /// remainder going to the last layer.
    pub epochs: usize,
    pub seed: u64,
    pub precision: Precision,
    pub eval_with_ema: bool,
    pub ema_decay: f64,
    pub mode: Mode,
    pub augment: bool,
    pub val_fraction: f64,
    pub ff_theta: f64,
    pub ff_aggregation: FfAggregation,
    /// Value written at the label position of FF inputs; `None` uses the
    /// largest pixel value of the training set.
    pub ff_label_value: Option<f64>,
    /// Stop once the headline validation accuracy reaches this for
    /// `patience` consecutive epochs.
    pub target_acc: Option<f64>,
    pub patience: usize,
    /// Write wall-clock seconds into metrics; off gives byte-stable output.
    pub record_seconds: bool,
    /// Worker threads for evaluation.
    pub threads: usize,
    /// Use only the first N training samples (0 = all).
    pub train_limit: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: DatasetName::Mnist,
            arch: vec![
                LayerSpec::Dense { width: 1024 },
                LayerSpec::Dense { width: 512 },
                LayerSpec::Dense { width: 256 },
            ],
            activation: Activation::Relu,
            loss_kind: LossKind::SmoothMargin,
            tau: 10.0,
            protos_per_class: 1,
            scale_input: true,
            scale_sims: true,
            loss_placement: LossPlacement::PostActivation,
            lr: 1e-3,
            batch_size: 128,
            epochs: 20,
            seed: 0,
            precision: Precision::F32,
            eval_with_ema: true,
            ema_decay: 0.99,
            mode: Mode::PerBatchLocal,
            augment: false,
            val_fraction: 0.1,
            ff_theta: 2.0,
            ff_aggregation: FfAggregation::SumExceptFirst,
            ff_label_value: None,
            target_acc: None,
            patience: 1,
            record_seconds: true,
            threads: 1,
            train_limit: 0,
        }
    }
}

pub const PRESETS: [&str; 5] = ["mnist-mlp-small", "mnist-mlp-paper", "mnist-cnn", "cifar10-cnn", "mnist-ff"];

const KEYS: &str = "dataset, arch, activation, loss_kind, tau, protos_per_class, scale_input, scale_sims, \
loss_placement, lr, batch_size, epochs, seed, precision, eval_with_ema, ema_decay, mode, augment, \
val_fraction, ff_theta, ff_aggregation, ff_label_value, target_acc, patience, record_seconds, threads, \
train_limit, preset";

fn parse_bool(v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(HffError::config(format!("`{v}`; expected true|false"))),
    }
}

fn parse_num<N: FromStr>(v: &str, what: &str) -> Result<N> {
    v.parse().map_err(|_| HffError::config(format!("`{v}`; expected {what}")))
}

impl TrainConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        match name {
            "mnist-mlp-small" => {}
            "mnist-mlp-paper" => {
                c.arch = vec![LayerSpec::Dense { width: 2000 }; 3];
                c.epochs = 150;
            }
            "mnist-cnn" => {
                c.arch = parse_arch("c32a64-c64a32")?;
                c.lr = 1e-4;
                c.epochs = 150;
                c.batch_size = 64;
            }
            "cifar10-cnn" => {
                c.dataset = DatasetName::Cifar10;
                c.arch = parse_arch("c32a256-c64a128-c128a64")?;
                c.lr = 1e-4;
                c.epochs = 300;
                c.batch_size = 64;
                c.augment = true;
            }
            "mnist-ff" => {
                c.loss_kind = LossKind::Ff;
                c.scale_input = false;
                c.scale_sims = false;
            }
            _ => return Err(HffError::config(format!("preset `{name}`; expected one of {}", PRESETS.join("|")))),
        }
        Ok(c)
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let wrap = |e: HffError| match e {
            HffError::Config(m) => HffError::config(format!("{key}: {m}")),
            other => other,
        };
        (|| -> Result<()> {
            match key {
                "dataset" => self.dataset = v.parse()?,
                "arch" => self.arch = parse_arch(v)?,
                "activation" => self.activation = v.parse()?,
                "loss_kind" | "loss" => self.loss_kind = v.parse()?,
                "tau" => self.tau = parse_num(v, "a positive real")?,
                "protos_per_class" | "P" | "p" => self.protos_per_class = parse_num(v, "a positive integer")?,
                "scale_input" => self.scale_input = parse_bool(v)?,
                "scale_sims" => self.scale_sims = parse_bool(v)?,
                "loss_placement" => self.loss_placement = v.parse()?,
                "lr" => self.lr = parse_num(v, "a non-negative real")?,
                "batch_size" => self.batch_size = parse_num(v, "a positive integer")?,
                "epochs" => self.epochs = parse_num(v, "a positive integer")?,
                "seed" => self.seed = parse_num(v, "an unsigned integer")?,
                "precision" => self.precision = v.parse()?,
                "eval_with_ema" => self.eval_with_ema = parse_bool(v)?,
                "ema_decay" => self.ema_decay = parse_num(v, "a real in [0, 1)")?,
                "mode" => self.mode = v.parse()?,
                "augment" => self.augment = parse_bool(v)?,
                "val_fraction" => self.val_fraction = parse_num(v, "a real in [0, 1)")?,
                "ff_theta" => self.ff_theta = parse_num(v, "a real")?,
                "ff_aggregation" => self.ff_aggregation = v.parse()?,
                "ff_label_value" => {
                    self.ff_label_value = if v == "max" { None } else { Some(parse_num(v, "a real or max")?) }
                }
                "target_acc" => {
                    self.target_acc = if v == "none" { None } else { Some(parse_num(v, "a real in [0, 1] or none")?) }
                }
                "patience" => self.patience = parse_num(v, "a positive integer")?,
                "record_seconds" => self.record_seconds = parse_bool(v)?,
                "threads" => self.threads = parse_num(v, "a positive integer")?,
                "train_limit" => self.train_limit = parse_num(v, "an unsigned integer")?,
                _ => {
                    return Err(HffError::config(format!("unknown key `{key}`; accepted keys: {KEYS}")));
                }
            }
            Ok(())
        })()
        .map_err(wrap)
    }

    /// Parses flat `key = value` text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines in order; a `preset` line resets
    /// everything before it. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HffError::config(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "preset" {
                *self = TrainConfig::preset(v)?;
            } else {
                self.set(k, v)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HffError::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `--key value` pairs; dashes in keys read as underscores.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<()> {
        let mut it = args.iter();
        while let Some(flag) = it.next() {
            let key = flag
                .strip_prefix("--")
                .ok_or_else(|| HffError::Usage(format!("expected `--key value`, got `{flag}`")))?
                .replace('-', "_");
            let value = it.next().ok_or_else(|| HffError::Usage(format!("`{flag}` needs a value")))?;
            if key == "preset" {
                *self = TrainConfig::preset(value)?;
            } else {
                self.set(&key, value)?;
            }
        }
        Ok(())
    }

    /// Checks every invariant that can be checked without data.
    pub fn validate(&self) -> Result<()> {
        if self.arch.is_empty() {
            return Err(HffError::config("arch must list at least one layer"));
        }
        if self.epochs == 0 {
            return Err(HffError::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(HffError::config("batch_size must be at least 1"));
        }
        if self.protos_per_class == 0 {
            return Err(HffError::config("protos_per_class must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(HffError::config("lr must be a non-negative finite real"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(HffError::config("ema_decay must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(HffError::config("val_fraction must lie in [0, 1)"));
        }
        if self.patience == 0 || self.threads == 0 {
            return Err(HffError::config("patience and threads must be at least 1"));
        }
        if let Some(t) = self.target_acc {
            if !(0.0..=1.0).contains(&t) {
                return Err(HffError::config("target_acc must lie in [0, 1]"));
            }
        }
        if self.loss_kind == LossKind::Ff {
            if self.arch.iter().any(|l| matches!(l, LayerSpec::Conv { .. })) {
                return Err(HffError::config("the FF baseline supports dense architectures only"));
            }
        } else {
            self.head_options().validate()?;
        }
        Ok(())
    }

    pub fn head_options(&self) -> HeadOptions {
        HeadOptions {
            activation: self.activation,
            placement: self.loss_placement,
            scale_input: self.scale_input,
            scale_sims: self.scale_sims,
            tau: self.tau,
        }
    }

    /// Fills data-dependent defaults from the training set.
    pub fn resolve(&self, train: &crate::data::LabeledDataset) -> TrainConfig {
        let mut c = self.clone();
        if c.ff_label_value.is_none() {
            let max = train.images.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
            c.ff_label_value = Some(if max.is_finite() { f64::from(max) } else { 1.0 });
        }
        c
    }

    /// Epochs each layer trains for in greedy mode.
    pub fn greedy_schedule(&self) -> Vec<usize> {
        let l = self.arch.len();
        let base = self.epochs / l;
        let mut s = vec![base; l];
        s[l - 1] += self.epochs % l;
        s
    }

    /// Canonical `key = value` text; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let target = self.target_acc.map_or_else(|| "none".to_string(), |t| format!("{t:?}"));
        let pairs: [(&str, String); 27] = [
            ("dataset", self.dataset.name().into()),
            ("arch", arch_string(&self.arch)),
            ("activation", self.activation.name().into()),
            ("loss_kind", self.loss_kind.name().into()),
            ("tau", format!("{:?}", self.tau)),
            ("protos_per_class", self.protos_per_class.to_string()),
            ("scale_input", self.scale_input.to_string()),
            ("scale_sims", self.scale_sims.to_string()),
            ("loss_placement", self.loss_placement.name().into()),
            ("lr", format!("{:?}", self.lr)),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("precision", self.precision.name().into()),
            ("eval_with_ema", self.eval_with_ema.to_string()),
            ("ema_decay", format!("{:?}", self.ema_decay)),
            ("mode", self.mode.name().into()),
            ("augment", self.augment.to_string()),
            ("val_fraction", format!("{:?}", self.val_fraction)),
            ("ff_theta", format!("{:?}", self.ff_theta)),
            ("ff_aggregation", self.ff_aggregation.name().into()),
            ("ff_label_value", self.ff_label_value.map_or_else(|| "max".to_string(), |v| format!("{v:?}"))),
            ("target_acc", target),
            ("patience", self.patience.to_string()),
            ("record_seconds", self.record_seconds.to_string()),
            ("threads", self.threads.to_string()),
            ("train_limit", self.train_limit.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
