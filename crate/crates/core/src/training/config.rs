//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::network::{ModelConfig, Preset, RescaleScope};
use crate::quant::{PactMode, RescaleMode, WeightFormat};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    /// IDX files of the 28×28 handwritten-digit set.
    Mnist,
    /// Binary batches of the 32×32 ten-class color set.
    Cifar10,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub path: Option<PathBuf>,
    /// `None` takes the whole split of a file dataset; synthetic sets
    /// default to 512 / 1000.
    pub train_size: Option<usize>,
    pub val_size: Option<usize>,
    pub image_size: usize,
    pub channels: usize,
    pub noise: f64,
    pub data_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub diag_every: usize,
}

pub const KEYS: &[&str] = &[
    "preset",
    "epochs",
    "bits",
    "act_bits",
    "first_last_bits",
    "clamp",
    "rescale",
    "rescale_scope",
    "pact_mode",
    "width",
    "classes",
    "batch_size",
    "base_lr",
    "warmup_epochs",
    "momentum",
    "weight_decay",
    "seed",
    "dataset",
    "dataset_path",
    "train_size",
    "val_size",
    "image_size",
    "channels",
    "noise",
    "data_seed",
    "diag_every",
];

const REQUIRED: &[&str] = &["preset", "epochs", "bits"];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{v}`")))
}

fn parse_bits(key: &str, v: &str) -> Result<Option<u32>> {
    if v == "fp" {
        Ok(None)
    } else {
        parse_num(key, v).map(Some)
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "key `{key}`: expected true|false, got `{v}`"
        ))),
    }
}

fn with_key<T>(key: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config(msg) if msg.starts_with("key ") => Error::Config(msg),
        Error::Config(msg) => Error::Config(format!("key `{key}`: {msg}")),
        other => Error::Config(format!("key `{key}`: {other}")),
    })
}

impl TrainConfig {
    /// Parses config text. `#` starts a comment; blank lines are ignored;
    /// unknown and repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!(
                    "line {}: unknown key `{k}`",
                    lineno + 1
                )));
            }
            if kv.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{k}`",
                    lineno + 1
                )));
            }
        }
        Self::from_map(&kv)
    }

    pub fn from_map(kv: &BTreeMap<String, String>) -> Result<Self> {
        for k in REQUIRED {
            if !kv.contains_key(*k) {
                return Err(Error::Config(format!("missing required key `{k}`")));
            }
        }
        let get = |k: &str| kv.get(k).map(String::as_str);

        let bits = parse_bits("bits", get("bits").unwrap())?;
        let clamp = match get("clamp") {
            Some(v) => parse_bool("clamp", v)?,
            None => bits.is_some(),
        };
        let weights = match (bits, clamp) {
            (Some(b), _) => WeightFormat::Quantized(b),
            (None, true) => WeightFormat::Clamped,
            (None, false) => WeightFormat::Float,
        };
        if bits.is_some() && !clamp {
            return Err(Error::Config(
                "key `clamp`: quantized weights are always clamped".into(),
            ));
        }
        let rescale = match get("rescale") {
            Some(v) => with_key("rescale", v.parse::<RescaleMode>())?,
            None if weights.is_transformed() => RescaleMode::Constant,
            None => RescaleMode::None,
        };
        let act_bits = match get("act_bits") {
            Some(v) => parse_bits("act_bits", v)?,
            None => None,
        };
        let model = ModelConfig {
            preset: with_key("preset", get("preset").unwrap().parse::<Preset>())?,
            input: [0, 0, 0],
            classes: get("classes")
                .map(|v| parse_num("classes", v))
                .transpose()?
                .unwrap_or(10),
            width: get("width")
                .map(|v| parse_num("width", v))
                .transpose()?
                .unwrap_or(8),
            weights,
            first_last_bits: get("first_last_bits")
                .map(|v| parse_num("first_last_bits", v))
                .transpose()?
                .unwrap_or(8),
            rescale,
            rescale_scope: match get("rescale_scope") {
                Some(v) => with_key("rescale_scope", v.parse::<RescaleScope>())?,
                None => RescaleScope::Auto,
            },
            act_bits,
            pact_mode: match get("pact_mode") {
                Some(v) => with_key("pact_mode", v.parse::<PactMode>())?,
                None => PactMode::Calibrated,
            },
        };
        let kind = match get("dataset").unwrap_or("synthetic") {
            "synthetic" => DatasetKind::Synthetic,
            "mnist" => DatasetKind::Mnist,
            "cifar10" => DatasetKind::Cifar10,
            other => {
                return Err(Error::Config(format!(
                    "key `dataset`: unknown dataset `{other}`"
                )))
            }
        };
        let num = |k: &str, default: usize| -> Result<usize> {
            get(k)
                .map(|v| parse_num(k, v))
                .transpose()
                .map(|o| o.unwrap_or(default))
        };
        let real = |k: &str, default: f64| -> Result<f64> {
            get(k)
                .map(|v| parse_num(k, v))
                .transpose()
                .map(|o| o.unwrap_or(default))
        };
        let dataset = DatasetSpec {
            kind,
            path: get("dataset_path").map(PathBuf::from),
            train_size: get("train_size")
                .map(|v| parse_num("train_size", v))
                .transpose()?,
            val_size: get("val_size")
                .map(|v| parse_num("val_size", v))
                .transpose()?,
            image_size: num("image_size", 32)?,
            channels: num("channels", 3)?,
            noise: real("noise", 1.0)?,
            data_seed: get("data_seed")
                .map(|v| parse_num("data_seed", v))
                .transpose()?
                .unwrap_or(1234),
        };
        let mut cfg = TrainConfig {
            model,
            epochs: num("epochs", 0)?,
            batch_size: num("batch_size", 32)?,
            base_lr: real("base_lr", 0.05)?,
            warmup_epochs: num("warmup_epochs", 0)?,
            momentum: real("momentum", 0.9)?,
            weight_decay: real("weight_decay", 4e-5)?,
            seed: get("seed")
                .map(|v| parse_num("seed", v))
                .transpose()?
                .unwrap_or(0),
            dataset,
            diag_every: num("diag_every", 50)?,
        };
        cfg.model.input = cfg.input_shape();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sample shape implied by the dataset.
    pub fn input_shape(&self) -> [usize; 3] {
        match self.dataset.kind {
            DatasetKind::Synthetic => [
                self.dataset.channels,
                self.dataset.image_size,
                self.dataset.image_size,
            ],
            DatasetKind::Mnist => [1, 28, 28],
            DatasetKind::Cifar10 => [3, 32, 32],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("key `epochs`: must be ≥ 1".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "key `warmup_epochs`: must be < epochs ({} ≥ {})",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("key `batch_size`: must be ≥ 2".into()));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Config("key `base_lr`: must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("key `momentum`: must be in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("key `weight_decay`: must be ≥ 0".into()));
        }
        if !(self.dataset.noise >= 0.0) {
            return Err(Error::Config("key `noise`: must be ≥ 0".into()));
        }
        if self.dataset.train_size == Some(0) || self.dataset.val_size == Some(0) {
            return Err(Error::Config(
                "keys `train_size`/`val_size`: must be ≥ 1".into(),
            ));
        }
        if self.dataset.kind != DatasetKind::Synthetic && self.dataset.path.is_none() {
            return Err(Error::Config(
                "key `dataset_path`: required for file datasets".into(),
            ));
        }
        if self.dataset.kind == DatasetKind::Mnist && self.model.classes != 10
            || self.dataset.kind == DatasetKind::Cifar10 && self.model.classes != 10
        {
            return Err(Error::Config(
                "key `classes`: file datasets have 10 classes".into(),
            ));
        }
        self.model.validate()
    }

    /// Whether weights or activations are quantized, i.e. this is a
    /// finetuning run that needs a full-precision initialization.
    pub fn quantizes(&self) -> bool {
        self.model.weights.bits().is_some() || self.model.act_bits.is_some()
    }

    /// `(m_B / 256) · base_lr`
    pub fn peak_lr(&self) -> f64 {
        self.batch_size as f64 / 256.0 * self.base_lr
    }

    /// Canonical text of every resolved field; the config hash is taken
    /// over this.
    pub fn canonical(&self) -> String {
        let m = &self.model;
        let bits = |b: Option<u32>| b.map(|b| b.to_string()).unwrap_or_else(|| "fp".into());
        let d = &self.dataset;
        let size = |n: Option<usize>| n.map(|n| n.to_string()).unwrap_or_else(|| "all".into());
        let mut s = String::new();
        let pairs: Vec<(&str, String)> = vec![
            ("act_bits", bits(m.act_bits)),
            ("base_lr", self.base_lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("bits", bits(m.weights.bits())),
            ("channels", d.channels.to_string()),
            ("clamp", m.weights.is_transformed().to_string()),
            ("classes", m.classes.to_string()),
            ("data_seed", d.data_seed.to_string()),
            (
                "dataset",
                match d.kind {
                    DatasetKind::Synthetic => "synthetic",
                    DatasetKind::Mnist => "mnist",
                    DatasetKind::Cifar10 => "cifar10",
                }
                .to_string(),
            ),
            ("diag_every", self.diag_every.to_string()),
            ("epochs", self.epochs.to_string()),
            ("first_last_bits", m.first_last_bits.to_string()),
            ("image_size", d.image_size.to_string()),
            ("momentum", self.momentum.to_string()),
            ("noise", d.noise.to_string()),
            ("pact_mode", m.pact_mode.to_string()),
            ("preset", m.preset.to_string()),
            ("rescale", m.rescale.to_string()),
            ("rescale_scope", m.rescale_scope.to_string()),
            ("seed", self.seed.to_string()),
            ("train_size", size(d.train_size)),
            ("val_size", size(d.val_size)),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("width", m.width.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.canonical().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}
