//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mambamim_core::masking::{Grid3, ScanOrder};
use mambamim_core::model::{MaskFill, ModelConfig};
use mambamim_core::toki::TokiVariant;
use mambamim_core::train::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("{key}: invalid value {value:?} ({reason})")]
    Value { key: String, value: String, reason: String },
    #[error("override {0:?} is missing its value")]
    MissingValue(String),
    #[error("expected an override of the form --key value, got {0:?}")]
    NotAKey(String),
    #[error(transparent)]
    Model(#[from] mambamim_core::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub volume_shape: Grid3,
    pub n_stages: usize,
    pub cnn_width: usize,
    pub model_dim: usize,
    pub depth: usize,
    pub state_dim: usize,
    pub expand: usize,
    /// 0 disables the causal convolution.
    pub conv_width: usize,
    pub decoder_width: usize,
    pub mask_ratio: f64,
    pub mask_seed: Option<u64>,
    pub data_seed: Option<u64>,
    pub scan_order: ScanOrder,
    pub scan_seed: u64,
    pub toki_variant: TokiVariant,
    pub toki_init: f64,
    pub mask_fill: MaskFill,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// `None` lets each command pick its default.
    pub precision: Option<Precision>,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        Self {
            volume_shape: m.volume,
            n_stages: m.n_stages,
            cnn_width: m.cnn_width,
            model_dim: m.model_dim,
            depth: m.depth,
            state_dim: m.state_dim,
            expand: m.expand,
            conv_width: m.conv_width.unwrap_or(0),
            decoder_width: m.decoder_width,
            mask_ratio: t.mask_ratio,
            mask_seed: None,
            data_seed: None,
            scan_order: m.scan_order,
            scan_seed: m.scan_seed,
            toki_variant: m.toki_variant,
            toki_init: m.toki_init,
            mask_fill: m.mask_fill,
            lr: t.lr,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            steps: t.steps,
            precision: None,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

pub const KEYS: &[&str] = &[
    "volume_shape",
    "n_stages",
    "cnn_width",
    "model_dim",
    "depth",
    "state_dim",
    "expand",
    "conv_width",
    "decoder_width",
    "mask.ratio",
    "mask.seed",
    "data.seed",
    "scan.order",
    "scan.seed",
    "toki.variant",
    "toki.init",
    "decoder.mask_fill",
    "lr",
    "weight_decay",
    "batch_size",
    "steps",
    "precision",
    "seed",
    "out_dir",
];

fn bad(key: &str, value: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Value { key: key.into(), value: value.into(), reason: reason.into() }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| bad(key, value, e.to_string()))
}

fn parse_shape(key: &str, value: &str) -> Result<Grid3, ConfigError> {
    let parts: Vec<&str> = value.split(['x', ',']).map(str::trim).collect();
    match parts.as_slice() {
        [n] => Ok(Grid3::cube(num(key, n)?)),
        [x, y, z] => Ok(Grid3::new(num(key, x)?, num(key, y)?, num(key, z)?)),
        _ => Err(bad(key, value, "expected N or XxYxZ")),
    }
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "volume_shape" => self.volume_shape = parse_shape(key, v)?,
            "n_stages" => self.n_stages = num(key, v)?,
            "cnn_width" => self.cnn_width = num(key, v)?,
            "model_dim" => self.model_dim = num(key, v)?,
            "depth" => self.depth = num(key, v)?,
            "state_dim" => self.state_dim = num(key, v)?,
            "expand" => self.expand = num(key, v)?,
            "conv_width" => self.conv_width = num(key, v)?,
            "decoder_width" => self.decoder_width = num(key, v)?,
            "mask.ratio" => self.mask_ratio = num(key, v)?,
            "mask.seed" => self.mask_seed = Some(num(key, v)?),
            "data.seed" => self.data_seed = Some(num(key, v)?),
            "scan.order" => self.scan_order = ScanOrder::parse(v).ok_or_else(|| bad(key, v, "expected raster, zigzag, hilbert or shuffle"))?,
            "scan.seed" => self.scan_seed = num(key, v)?,
            "toki.variant" => self.toki_variant = TokiVariant::parse(v).ok_or_else(|| bad(key, v, "expected eq8 or alg3"))?,
            "toki.init" => self.toki_init = num(key, v)?,
            "decoder.mask_fill" => self.mask_fill = MaskFill::parse(v).ok_or_else(|| bad(key, v, "expected toki or learnable"))?,
            "lr" => self.lr = num(key, v)?,
            "weight_decay" => self.weight_decay = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "steps" => self.steps = num(key, v)?,
            "precision" => {
                self.precision = Some(match v {
                    "32" => Precision::F32,
                    "64" => Precision::F64,
                    _ => return Err(bad(key, v, "expected 32 or 64")),
                })
            }
            "seed" => self.seed = num(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Applies a config file body: one `key = value` per line, `#` comments.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax { line: n + 1, text: raw.into() })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        use anyhow::Context;
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text).with_context(|| format!("in config {}", path.display()))?;
        Ok(cfg)
    }

    /// Applies `--key value` pairs.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<(), ConfigError> {
        let mut it = args.iter();
        while let Some(flag) = it.next() {
            let key = flag.strip_prefix("--").ok_or_else(|| ConfigError::NotAKey(flag.clone()))?;
            if let Some((k, v)) = key.split_once('=') {
                self.set(k, v)?;
                continue;
            }
            let value = it.next().ok_or_else(|| ConfigError::MissingValue(key.into()))?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed.wrapping_add(1))
    }

    pub fn mask_seed(&self) -> u64 {
        self.mask_seed.unwrap_or(self.seed.wrapping_add(2))
    }

    pub fn model(&self) -> Result<ModelConfig, ConfigError> {
        let m = ModelConfig {
            volume: self.volume_shape,
            n_stages: self.n_stages,
            cnn_width: self.cnn_width,
            model_dim: self.model_dim,
            depth: self.depth,
            state_dim: self.state_dim,
            expand: self.expand,
            conv_width: (self.conv_width > 0).then_some(self.conv_width),
            decoder_width: self.decoder_width,
            mask_fill: self.mask_fill,
            toki_variant: self.toki_variant,
            toki_init: self.toki_init,
            scan_order: self.scan_order,
            scan_seed: self.scan_seed,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn train(&self) -> Result<TrainConfig, ConfigError> {
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(bad("mask.ratio", &self.mask_ratio.to_string(), "must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "0", "must be positive"));
        }
        if !(self.lr >= 0.0) {
            return Err(bad("lr", &self.lr.to_string(), "must be non-negative"));
        }
        Ok(TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            mask_ratio: self.mask_ratio,
            mask_seed: self.mask_seed(),
            data_seed: self.data_seed(),
            ..TrainConfig::default()
        })
    }

    /// Text form accepted by [`Self::apply_text`]; seeds are written resolved.
    pub fn to_text(&self) -> String {
        let g = self.volume_shape;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        kv("volume_shape", format!("{}x{}x{}", g.x, g.y, g.z));
        kv("n_stages", self.n_stages.to_string());
        kv("cnn_width", self.cnn_width.to_string());
        kv("model_dim", self.model_dim.to_string());
        kv("depth", self.depth.to_string());
        kv("state_dim", self.state_dim.to_string());
        kv("expand", self.expand.to_string());
        kv("conv_width", self.conv_width.to_string());
        kv("decoder_width", self.decoder_width.to_string());
        kv("mask.ratio", self.mask_ratio.to_string());
        kv("mask.seed", self.mask_seed().to_string());
        kv("data.seed", self.data_seed().to_string());
        kv("scan.order", self.scan_order.name().into());
        kv("scan.seed", self.scan_seed.to_string());
        kv("toki.variant", self.toki_variant.name().into());
        kv("toki.init", self.toki_init.to_string());
        kv("decoder.mask_fill", self.mask_fill.name().into());
        kv("lr", self.lr.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("steps", self.steps.to_string());
        if let Some(p) = self.precision {
            kv("precision", if p == Precision::F32 { "32" } else { "64" }.into());
        }
        kv("seed", self.seed.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        s
    }
}
