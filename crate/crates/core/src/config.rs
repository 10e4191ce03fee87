//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are rejected and
//! every key has a default, so an empty file is a valid configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{ModelConfig, Padding};
use crate::preprocess::HuWindow;
use crate::trainer::{Seeds, TrainConfig};

/// Every accepted key with its default value and meaning.
pub const KEYS: [(&str, &str, &str); 21] = [
    ("window.lo", "-1000", "lower HU bound of the window"),
    ("window.hi", "130", "upper HU bound of the window"),
    (
        "window.override",
        "false",
        "allow a window outside the catalog",
    ),
    (
        "input.dims",
        "128x128x64",
        "preprocessing target and model input",
    ),
    ("train.batch", "2", "batch size"),
    ("train.epochs", "100", "maximum epochs per fold"),
    ("train.patience", "15", "early-stopping patience in epochs"),
    ("train.lr", "0.0001", "Adam learning rate"),
    ("train.folds", "5", "cross-validation folds"),
    ("model.widths", "64,64,128,256", "conv block widths"),
    ("model.dense", "512", "hidden dense units"),
    ("model.padding", "valid", "conv padding: valid or same"),
    (
        "model.bn_momentum",
        "0.99",
        "batchnorm running-statistics momentum",
    ),
    ("seeds.init", "1", "weight initialization seed"),
    ("seeds.shuffle", "2", "epoch shuffling seed"),
    ("seeds.dropout", "3", "dropout mask seed"),
    ("seeds.folds", "4", "fold assignment seed"),
    ("paths.manifest", "manifest.tsv", "dataset manifest"),
    ("paths.output", "results", "run output directory"),
    (
        "paths.preprocessed",
        "preprocessed",
        "preprocessed dataset directory",
    ),
    (
        "augment.enabled",
        "true",
        "add six rotated copies of each training case",
    ),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub window: HuWindow,
    pub window_override: bool,
    pub input_dims: [usize; 3],
    pub batch: usize,
    pub epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub folds: usize,
    pub widths: Vec<usize>,
    pub dense: usize,
    pub padding: Padding,
    pub bn_momentum: f64,
    pub seeds: Seeds,
    pub manifest: PathBuf,
    pub output: PathBuf,
    pub preprocessed: PathBuf,
    pub augment: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::parse("").expect("defaults parse")
    }
}

fn bad(key: &str, value: &str, want: &str) -> Error {
    Error::Config(format!("{key} = {value:?}: expected {want}"))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, "a number"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, value, "true or false")),
    }
}

fn parse_dims(key: &str, value: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = value
        .split('x')
        .map(|p| p.trim().parse().map_err(|_| bad(key, value, "NXxNYxNZ")))
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| bad(key, value, "three extents, e.g. 128x128x64"))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values: Vec<(String, String)> = KEYS
            .iter()
            .map(|(k, v, _)| (k.to_string(), v.to_string()))
            .collect();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected key = value, got {line:?}",
                    lineno + 1
                ))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let slot = values.iter_mut().find(|(k, _)| k == key).ok_or_else(|| {
                Error::Config(format!("line {}: unknown key {key:?}", lineno + 1))
            })?;
            slot.1 = value.to_string();
        }
        let get =
            |key: &str| -> &str { &values.iter().find(|(k, _)| k == key).expect("known key").1 };

        let lo: f64 = parse_num("window.lo", get("window.lo"))?;
        let hi: f64 = parse_num("window.hi", get("window.hi"))?;
        let window = HuWindow::new(lo, hi).map_err(|e| Error::Config(e.to_string()))?;
        let widths = get("model.widths")
            .split(',')
            .map(|w| parse_num("model.widths", w.trim()))
            .collect::<Result<Vec<usize>>>()?;
        let padding = match get("model.padding") {
            "valid" => Padding::Valid,
            "same" => Padding::Same,
            other => return Err(bad("model.padding", other, "valid or same")),
        };
        Ok(RunConfig {
            window,
            window_override: parse_bool("window.override", get("window.override"))?,
            input_dims: parse_dims("input.dims", get("input.dims"))?,
            batch: parse_num("train.batch", get("train.batch"))?,
            epochs: parse_num("train.epochs", get("train.epochs"))?,
            patience: parse_num("train.patience", get("train.patience"))?,
            lr: parse_num("train.lr", get("train.lr"))?,
            folds: parse_num("train.folds", get("train.folds"))?,
            widths,
            dense: parse_num("model.dense", get("model.dense"))?,
            padding,
            bn_momentum: parse_num("model.bn_momentum", get("model.bn_momentum"))?,
            seeds: Seeds {
                init: parse_num("seeds.init", get("seeds.init"))?,
                shuffle: parse_num("seeds.shuffle", get("seeds.shuffle"))?,
                dropout: parse_num("seeds.dropout", get("seeds.dropout"))?,
                folds: parse_num("seeds.folds", get("seeds.folds"))?,
            },
            manifest: PathBuf::from(get("paths.manifest")),
            output: PathBuf::from(get("paths.output")),
            preprocessed: PathBuf::from(get("paths.preprocessed")),
            augment: parse_bool("augment.enabled", get("augment.enabled"))?,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text)
    }

    /// Every key in canonical order; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let pad = match self.padding {
            Padding::Valid => "valid",
            Padding::Same => "same",
        };
        let [x, y, z] = self.input_dims;
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        let pairs = [
            ("window.lo", self.window.lo().to_string()),
            ("window.hi", self.window.hi().to_string()),
            ("window.override", self.window_override.to_string()),
            ("input.dims", format!("{x}x{y}x{z}")),
            ("train.batch", self.batch.to_string()),
            ("train.epochs", self.epochs.to_string()),
            ("train.patience", self.patience.to_string()),
            ("train.lr", format!("{:?}", self.lr)),
            ("train.folds", self.folds.to_string()),
            ("model.widths", widths.join(",")),
            ("model.dense", self.dense.to_string()),
            ("model.padding", pad.to_string()),
            ("model.bn_momentum", format!("{:?}", self.bn_momentum)),
            ("seeds.init", self.seeds.init.to_string()),
            ("seeds.shuffle", self.seeds.shuffle.to_string()),
            ("seeds.dropout", self.seeds.dropout.to_string()),
            ("seeds.folds", self.seeds.folds.to_string()),
            ("paths.manifest", self.manifest.display().to_string()),
            ("paths.output", self.output.display().to_string()),
            (
                "paths.preprocessed",
                self.preprocessed.display().to_string(),
            ),
            ("augment.enabled", self.augment.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            writeln!(out, "{k} = {v}").expect("write to string");
        }
        out
    }

    /// First 16 hex digits of SHA-256 over the canonical text.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Rejects windows outside the catalog unless overridden.
    pub fn checked_window(&self) -> Result<HuWindow> {
        if !self.window.is_canonical() && !self.window_override {
            return Err(Error::Config(format!(
                "window {} is not in the catalog; set window.override = true to use it",
                self.window
            )));
        }
        Ok(self.window)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_dims: self.input_dims,
            widths: self.widths.clone(),
            dense_units: self.dense,
            padding: self.padding,
            bn_momentum: self.bn_momentum,
            ..ModelConfig::default()
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            window: self.checked_window()?,
            model: self.model_config(),
            batch_size: self.batch,
            max_epochs: self.epochs,
            patience: self.patience,
            learning_rate: self.lr,
            seeds: self.seeds,
            augment: self.augment,
            k_folds: self.folds,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_training_defaults() {
        let rc = RunConfig::default();
        let tc = rc.train_config().unwrap();
        assert_eq!(tc, TrainConfig::default());
        assert_eq!(rc.model_config(), ModelConfig::default());
    }

    #[test]
    fn roundtrip_and_hash() {
        let rc = RunConfig::parse(
            "input.dims = 64x64x32\nmodel.padding = same\n# note\n\ntrain.lr=0.001",
        )
        .unwrap();
        assert_eq!(rc.input_dims, [64, 64, 32]);
        assert_eq!(rc.padding, Padding::Same);
        assert_eq!(RunConfig::parse(&rc.to_text()).unwrap(), rc);
        assert_eq!(rc.hash(), RunConfig::parse(&rc.to_text()).unwrap().hash());
        assert_ne!(rc.hash(), RunConfig::default().hash());
        assert_eq!(rc.hash().len(), 16);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(matches!(
            RunConfig::parse("window.mid = 3"),
            Err(Error::Config(_))
        ));
        assert!(RunConfig::parse("just text").is_err());
        assert!(RunConfig::parse("input.dims = 64x64").is_err());
        assert!(RunConfig::parse("augment.enabled = yes").is_err());
        assert!(RunConfig::parse("window.lo = 200").is_err());
    }

    #[test]
    fn window_override() {
        let rc = RunConfig::parse("window.lo = -500\nwindow.hi = 100").unwrap();
        assert!(matches!(rc.checked_window(), Err(Error::Config(_))));
        let rc =
            RunConfig::parse("window.lo = -500\nwindow.hi = 100\nwindow.override = true").unwrap();
        assert_eq!(rc.checked_window().unwrap().lo(), -500.0);
    }

    #[test]
    fn every_key_documented_once() {
        let mut keys: Vec<&str> = KEYS.iter().map(|k| k.0).collect();
        keys.sort_unstable();
        keys.dedup();
        assert_eq!(keys.len(), KEYS.len());
        let text = RunConfig::default().to_text();
        assert_eq!(text.lines().count(), KEYS.len());
    }
}
